pub mod api;
pub mod bsp;
pub mod bundle;
pub mod custody;
pub mod emu;
pub mod fragment;
pub mod linkbudget;
pub mod orbital;
pub mod routing;
pub mod sim;
pub mod store;
pub mod time;
