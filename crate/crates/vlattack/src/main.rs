fn main() {
    // CLI lands with the harness module.
}
