#include <iostream>

#include "hsod/cli.hpp"

int main(int argc, char** argv) {
  return hsod::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
