pub mod tensor;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod fed;
pub mod harness;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
