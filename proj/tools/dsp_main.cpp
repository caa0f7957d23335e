#include <string>
#include <vector>

#include "dsp/cli.hpp"

int main(int argc, char** argv) { return dsp::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
