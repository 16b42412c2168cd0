#include "dyneval/cli.hpp"

int main(int argc, char** argv) { return dyneval::run_cli(argc, argv); }
