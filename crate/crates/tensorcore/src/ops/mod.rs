pub mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod reduce;
mod shape;
mod softmax;
mod sort;

