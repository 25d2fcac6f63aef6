pub mod address;
pub mod credstore;
pub mod imapcodec;
pub mod policy;
pub mod proxy;
pub mod store;
pub mod viewmap;
pub mod mockimap;
