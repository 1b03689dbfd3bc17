#include <iostream>

#include "adapprox/cli.hpp"

int main(int argc, char** argv) { return adapprox::cli::run(argc, argv, std::cout, std::cerr); }
