pub mod bundle;
pub mod corpus;
pub mod emulator;
pub mod gateway;
pub mod instrument;
pub mod isa;
pub mod loader;
pub mod pipeline;
pub mod templates;
pub mod verifier;
