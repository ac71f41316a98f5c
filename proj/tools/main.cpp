#include "crfill/cli.hpp"

int main(int argc, char** argv) { return crfill::run_cli(argc, argv); }
