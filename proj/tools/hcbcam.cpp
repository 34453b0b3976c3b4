#include "hcbcam/cli.hpp"

int main(int argc, char** argv) { return hcbcam::cli::run(argc, argv); }
