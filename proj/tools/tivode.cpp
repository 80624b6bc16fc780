#include "tivode/cli.hpp"

int main(int argc, char** argv) { return tivode::run_cli(argc, argv); }
