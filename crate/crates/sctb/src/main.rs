fn main() {
    println!("sctb");
}
