#include "kdgan/cli.hpp"

int main(int argc, char** argv) { return kdgan::run_cli(argc, argv); }
