#include <iostream>

#include "ensemble_forge/cli.hpp"

int main(int argc, char** argv) { return ensemble_forge::cli::run(argc, argv, std::cout, std::cerr); }
