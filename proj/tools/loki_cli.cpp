#include <iostream>

#include "loki/cli/app.hpp"

int main(int argc, char** argv) { return loki::cli::run(argc, argv, std::cout, std::cerr); }
