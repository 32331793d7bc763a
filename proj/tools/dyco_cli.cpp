#include "cli.hpp"

int main(int argc, char** argv) { return dyco::cli::run(argc, argv); }
