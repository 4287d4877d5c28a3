#include <iostream>

#include "ctrlkit/cli.hpp"

int main(int argc, char** argv) { return ctrlkit::cli::run(argc, argv, std::cout, std::cerr); }
