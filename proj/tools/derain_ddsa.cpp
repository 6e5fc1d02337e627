#include "ddsa/cli.hpp"

int main(int argc, char** argv) {
  return ddsa::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
