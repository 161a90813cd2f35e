//! Direction-dependent piece-wise time-delay plant model.
//!
//! The plant switches between two first-order modes depending on the sign of
//! the input increment: mode 1 is active while the input decreases (slow,
//! long delay), mode 2 while it increases (fast, short delay). A zero
//! increment holds the previous mode. Each mode has its own pole `a`, input
//! gain `b`, offset `c` and integer delay `d`:
//!
//! ```text
//! x[k+1] = a_s x[k] + b_s u[k - d_s] + c_s
//! ```
//!
//! This module also builds the stacked closed-loop matrices used by the
//! stability analysis: the state is augmented with its running sum so that a
//! PI law becomes static output feedback, then stacked with its last `d2`
//! values.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Active parameter set of the plant.
///
/// `Down` (index 1) is selected while the input decreases, `Up` (index 2)
/// while it increases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Down,
    Up,
}

impl Mode {
    /// 1-based mode index as used in logs and trace files.
    pub fn sigma(self) -> u8 {
        match self {
            Mode::Down => 1,
            Mode::Up => 2,
        }
    }

    pub fn from_sigma(sigma: u8) -> Result<Self> {
        match sigma {
            1 => Ok(Mode::Down),
            2 => Ok(Mode::Up),
            other => Err(Error::InvalidModel(format!(
                "mode index must be 1 or 2, got {other}"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.sigma())
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.sigma())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Mode::from_sigma(v).map_err(serde::de::Error::custom)
    }
}

/// Two-mode piece-wise time-delay plant parameters.
///
/// Invariants enforced on construction: both delays are at least one sample,
/// all coefficients are finite, and the modes are ordered so that
/// `d2 <= d1` (the increasing-input mode is the short-delay one). If the
/// caller provides parameters violating the delay ordering, the two modes
/// are swapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct PiecewiseModel {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub c1: f64,
    pub c2: f64,
    pub d1: usize,
    pub d2: usize,
    /// Sampling period in seconds. Metadata only; the model is discrete-time.
    pub sampling_period: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    c1: f64,
    c2: f64,
    d1: usize,
    d2: usize,
    sampling_period: f64,
}

impl TryFrom<RawModel> for PiecewiseModel {
    type Error = Error;
    fn try_from(r: RawModel) -> Result<Self> {
        PiecewiseModel::new(r.a1, r.a2, r.b1, r.b2, r.c1, r.c2, r.d1, r.d2, r.sampling_period)
    }
}

impl PiecewiseModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a1: f64,
        a2: f64,
        b1: f64,
        b2: f64,
        c1: f64,
        c2: f64,
        d1: usize,
        d2: usize,
        sampling_period: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("a1", a1),
            ("a2", a2),
            ("b1", b1),
            ("b2", b2),
            ("c1", c1),
            ("c2", c2),
            ("sampling_period", sampling_period),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidModel(format!("{name} is not finite: {v}")));
            }
        }
        if d1 < 1 || d2 < 1 {
            return Err(Error::InvalidModel(format!(
                "delays must be >= 1 sample, got d1={d1}, d2={d2}"
            )));
        }
        // Mode 2 is the short-delay mode by convention; swap if violated so
        // downstream code can always assume h = d1 - d2 >= 0.
        if d2 > d1 {
            return Ok(Self {
                a1: a2,
                a2: a1,
                b1: b2,
                b2: b1,
                c1: c2,
                c2: c1,
                d1: d2,
                d2: d1,
                sampling_period,
            });
        }
        Ok(Self {
            a1,
            a2,
            b1,
            b2,
            c1,
            c2,
            d1,
            d2,
            sampling_period,
        })
    }

    pub fn a(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Down => self.a1,
            Mode::Up => self.a2,
        }
    }

    pub fn b(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Down => self.b1,
            Mode::Up => self.b2,
        }
    }

    pub fn c(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Down => self.c1,
            Mode::Up => self.c2,
        }
    }

    pub fn delay(&self, mode: Mode) -> usize {
        match mode {
            Mode::Down => self.d1,
            Mode::Up => self.d2,
        }
    }

    pub fn max_delay(&self) -> usize {
        self.d1.max(self.d2)
    }

    /// Delay gap `h = d1 - d2`. Non-negative by construction.
    pub fn delay_gap(&self) -> usize {
        self.d1 - self.d2
    }

    /// Copy of the model with both offsets zeroed (the regulated form used
    /// by the stability analysis).
    pub fn without_offsets(&self) -> Self {
        Self {
            c1: 0.0,
            c2: 0.0,
            ..self.clone()
        }
    }

    /// Open-loop marginality flags. `|a| >= 1` is allowed by the type but
    /// worth surfacing to the operator.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.a1.abs() >= 1.0 {
            w.push(format!("mode 1 pole |a1| = {} is not strictly stable", self.a1.abs()));
        }
        if self.a2.abs() >= 1.0 {
            w.push(format!("mode 2 pole |a2| = {} is not strictly stable", self.a2.abs()));
        }
        w
    }
}

/// Switching memory: the active mode and the input the next increment is
/// measured against. This is all the state the three-branch rule needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwitchState {
    pub mode: Mode,
    pub previous_input: f64,
}

impl SwitchState {
    pub fn new(mode: Mode, previous_input: f64) -> Self {
        Self {
            mode,
            previous_input,
        }
    }
}

/// Applies the three-branch switching rule to one new input sample.
///
/// The increment is `du = u - state.previous_input`; a decrease selects mode
/// 1, an increase mode 2 and `|du| <= dead_band` holds the previous mode.
/// With the default `dead_band = 0` the hold branch fires only on exact
/// floating-point equality.
pub fn advance_switch(state: SwitchState, u: f64, dead_band: f64) -> SwitchState {
    debug_assert!(dead_band >= 0.0);
    let du = u - state.previous_input;
    let mode = if du < -dead_band {
        Mode::Down
    } else if du > dead_band {
        Mode::Up
    } else {
        state.mode
    };
    SwitchState {
        mode,
        previous_input: u,
    }
}

/// Advances the plant one sample.
///
/// `input_history` must hold the most recent inputs in chronological order
/// with the newest sample `u[k]` last; the switching rule is applied to that
/// newest sample first, and the selected mode's delayed input
/// `u[k - d]` is then read from the history.
pub fn step_plant(
    model: &PiecewiseModel,
    x: f64,
    input_history: &[f64],
    state: SwitchState,
    dead_band: f64,
) -> Result<(f64, SwitchState)> {
    let newest = *input_history.last().ok_or(Error::InsufficientHistory {
        required: 1,
        got: 0,
    })?;
    let next_state = advance_switch(state, newest, dead_band);
    let mode = next_state.mode;
    let d = model.delay(mode);
    if input_history.len() < d + 1 {
        return Err(Error::InsufficientHistory {
            required: d + 1,
            got: input_history.len(),
        });
    }
    let u_delayed = input_history[input_history.len() - 1 - d];
    let x_next = model.a(mode) * x + model.b(mode) * u_delayed + model.c(mode);
    Ok((x_next, next_state))
}

/// Fixed point of one mode under a constant input: `(c + b u) / (1 - a)`.
pub fn steady_state(model: &PiecewiseModel, mode: Mode, u: f64) -> Result<f64> {
    let a = model.a(mode);
    if a == 1.0 {
        return Err(Error::PoleAtOne { mode });
    }
    Ok((model.c(mode) + model.b(mode) * u) / (1.0 - a))
}

/// Proportional and integral gains of the PI law `u = kp e + ki sum(e)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PIGains {
    pub kp: f64,
    pub ki: f64,
}

impl PIGains {
    pub fn new(kp: f64, ki: f64) -> Self {
        Self { kp, ki }
    }
}

/// Stacked closed-loop matrices of the regulated system.
///
/// The augmented per-mode state is `x^a = [x; running sum of x]` with
/// `A_s = [[a_s, 0], [1, 1]]`, `B_s = [b_s; 0]` and unit output map. The
/// stacked state `z[k] = [x^a[k]; ...; x^a[k - d2]]` has dimension
/// `n = 2 (d2 + 1)`. Mode matrices carry `A_s` in the leading block, the
/// output-feedback product `-B_s Kc` in block `(1, d2+1)` and identity
/// blocks on the sub-diagonal. The delayed-coupling matrix `apt` carries
/// `-B_1 Kc` in block `(1, d2+1)` only, and enters the mode-1 dynamics as
/// `z[k+1] = (a1t - apt) z[k] + apt z[k-h]` with `h = d1 - d2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopMatrices {
    /// Stacked state dimension `2 (d2 + 1)`.
    pub n: usize,
    /// Delay gap `d1 - d2`.
    pub h: usize,
    pub a1t: DMatrix<f64>,
    pub a2t: DMatrix<f64>,
    pub apt: DMatrix<f64>,
    pub aaug1: DMatrix<f64>,
    pub aaug2: DMatrix<f64>,
    pub baug1: DMatrix<f64>,
    pub baug2: DMatrix<f64>,
    pub c_out: DMatrix<f64>,
    pub gains: PIGains,
}

impl ClosedLoopMatrices {
    pub fn mode_matrix(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::Down => &self.a1t,
            Mode::Up => &self.a2t,
        }
    }

    /// Spectral radius of the short-delay mode matrix `a2t`.
    pub fn spectral_radius_a2(&self) -> f64 {
        self.a2t
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0, f64::max)
    }
}

/// Builds the stacked closed-loop matrices for a gain pair.
pub fn build_closed_loop(model: &PiecewiseModel, gains: PIGains) -> ClosedLoopMatrices {
    let d2 = model.d2;
    let n = 2 * (d2 + 1);
    let h = model.delay_gap();
    let aug_a = |a: f64| DMatrix::from_row_slice(2, 2, &[a, 0.0, 1.0, 1.0]);
    let aug_b = |b: f64| DMatrix::from_row_slice(2, 1, &[b, 0.0]);
    // B_s Kc C with C = I2: [[b kp, b ki], [0, 0]].
    let bkc = |b: f64| DMatrix::from_row_slice(2, 2, &[b * gains.kp, b * gains.ki, 0.0, 0.0]);

    let mode_matrix = |a: f64, b: f64| {
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (2, 2)).copy_from(&aug_a(a));
        m.view_mut((0, 2 * d2), (2, 2)).copy_from(&(-bkc(b)));
        for j in 1..=d2 {
            m.view_mut((2 * j, 2 * (j - 1)), (2, 2))
                .copy_from(&DMatrix::identity(2, 2));
        }
        m
    };
    let a1t = mode_matrix(model.a1, model.b1);
    let a2t = mode_matrix(model.a2, model.b2);
    let mut apt = DMatrix::zeros(n, n);
    apt.view_mut((0, 2 * d2), (2, 2)).copy_from(&(-bkc(model.b1)));

    ClosedLoopMatrices {
        n,
        h,
        a1t,
        a2t,
        apt,
        aaug1: aug_a(model.a1),
        aaug2: aug_a(model.a2),
        baug1: aug_b(model.b1),
        baug2: aug_b(model.b2),
        c_out: DMatrix::identity(2, 2),
        gains,
    }
}
