// placeholder, replaced when the acceptance suite lands
int main() { return 1; }
