#include "deform/cli.hpp"

int main(int argc, char** argv) { return deform::run_cli(argc, argv); }
