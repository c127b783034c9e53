fn main() {
    println!("lifemoe");
}
