#include "occ4d/cli.hpp"

int main(int argc, char** argv) { return occ4d::cli::run_cli(argc, argv); }
