#include "msgscreen/cli.hpp"

int main(int argc, char** argv) { return msgscreen::run_cli(argc, argv); }
