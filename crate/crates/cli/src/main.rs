fn main() {
    println!("axicas");
}
