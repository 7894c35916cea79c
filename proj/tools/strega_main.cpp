#include <iostream>

#include "strega/cli.hpp"

int main(int argc, char** argv) {
  return strega::cli_run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
