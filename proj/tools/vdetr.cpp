// Placeholder CLI; subcommands land with the driver modules.
int main() { return 0; }
