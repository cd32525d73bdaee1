pub mod range; pub mod gaussian; pub mod factorized;
