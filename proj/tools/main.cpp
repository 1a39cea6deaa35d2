#include "cli.hpp"

int main(int argc, char** argv) { return vsg::cli::dispatch(argc, argv); }
