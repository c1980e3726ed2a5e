#include "upscale/cli.hpp"

int main(int argc, char** argv) { return upscale::run_cli(argc, argv); }
