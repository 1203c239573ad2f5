fn main() {
    std::process::exit(bridgenmt::run());
}
