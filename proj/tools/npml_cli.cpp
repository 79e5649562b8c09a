#include "npml/cli.hpp"

int main(int argc, char** argv) { return npml::cli::run(argc, argv); }
