#include "chaincnn/cli.hpp"

int main(int argc, char** argv) { return chaincnn::run_cli(argc, argv); }
