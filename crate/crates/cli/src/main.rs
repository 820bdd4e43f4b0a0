fn main() {
    println!("triqdef");
}
