//! Placeholder until the guide chapters land.
