//! The guide in `book/` is plain mdbook, which cannot build listings that
//! depend on this workspace. Every chapter is pulled in here as the docs of
//! its own module instead, so `cargo test --doc` runs each listing against
//! the real crate and a failure names the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/entropy-coding.md")]
pub mod entropy_coding {}
#[doc = include_str!("../../../book/src/codec.md")]
pub mod codec {}
#[doc = include_str!("../../../book/src/saliency.md")]
pub mod saliency {}
#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}
#[doc = include_str!("../../../book/src/split-runtime.md")]
pub mod split_runtime {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/file-formats.md")]
pub mod file_formats {}
