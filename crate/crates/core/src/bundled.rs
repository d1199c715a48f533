//! Case files and day profiles shipped with the crate so that simulations,
//! tests and the CLI demo run without external data.

/// 9-bus / 3-generator / 9-branch transmission system.
pub const CASE9: &str = include_str!("../data/case9.case");

/// 3-bus ring with one generator.
pub const CASE3_RING: &str = include_str!("../data/case3ring.case");

/// 2-bus generator-plus-load instance, small enough for exhaustive search.
pub const CASE2: &str = include_str!("../data/case2.case");

/// Synthetic residential demand multipliers over 24 half-hour slots
/// (evening peak, overnight trough).
pub const LOAD_PROFILE_CSV: &str = include_str!("../data/load_profile.csv");

/// Synthetic charging price in $/kWh over the same 24 slots.
pub const PRICE_PROFILE_CSV: &str = include_str!("../data/price_profile.csv");
