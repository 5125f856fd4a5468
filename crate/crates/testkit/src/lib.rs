//! Brute-force oracles and seeded fixtures shared by the test suites.
//!
//! Everything here favours obviousness over speed: exhaustive enumeration,
//! quadratic scans, no shared code with the implementations under test
//! beyond the plain data types.

pub mod ap;
pub mod graphs;
