#include "bboxdp/cli.hpp"

int main(int argc, char** argv) { return bxl::cli::run_cli(argc, argv); }
