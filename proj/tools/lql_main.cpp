// CLI entry point; subcommands are registered in later commits.
int main() { return 0; }
