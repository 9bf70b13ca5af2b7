#include "cdd/cli.hpp"

int main(int argc, char** argv) { return cdd::run_cli(argc, argv); }
