#include <iostream>
#include <string>
#include <vector>

#include "s4nd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return s4nd::run_cli(args, std::cout, std::cerr);
}
