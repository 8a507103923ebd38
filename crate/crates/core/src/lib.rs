//! Desk-scale simulator of photonic RF interference management.
//!
//! A signal of interest and an interferer meet at a receiver; the mixture is put
//! on one laser, a clean copy of the interferer on another, and the two optical
//! powers are combined on a photodiode. With the reference arm delay-matched and
//! intensity-inverted the interference cancels. [`canceller`] finds those settings
//! automatically and [`rxdsp`] measures what is left.

pub mod canceller;
pub mod dsp;
pub mod output;
pub mod photonics;
pub mod rxdsp;
pub mod scenario;
pub mod sim;
pub mod waveforms;
