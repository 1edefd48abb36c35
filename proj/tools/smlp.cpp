#include <vector>

#include "smlp/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return smlp::run_cli(args);
}
