#include "rtrace/cli.hpp"

int main(int argc, char** argv) { return rtrace::cli::run_command(argc, argv); }
