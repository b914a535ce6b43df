#include "direl/cli.hpp"

int main(int argc, char** argv) {
  return direl::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
