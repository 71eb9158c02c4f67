#include <vector>
#include <string>

#include "slasim/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return slasim::cli_main(args);
}
