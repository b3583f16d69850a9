//! Elementary cellular automata used to generate the fixed expansion kernels
//! of the factorized convolution.
//!
//! A kernel for a layer with `c_out` outputs and `m` latent channels is the
//! stack of `m` successive states of a `c_out`-cell automaton started from a
//! stored seed row. States are mapped 0 → −1 and 1 → +1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_RULE: u8 = 30;

/// One automaton evolution: rule, lattice width, number of recorded states and seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaConfig {
    pub rule: u8,
    pub width: usize,
    pub steps: usize,
    pub seed_row: Vec<u8>,
}

impl CaConfig {
    pub fn new(rule: u8, width: usize, steps: usize, seed_row: Vec<u8>) -> Result<Self> {
        let cfg = CaConfig {
            rule,
            width,
            steps,
            seed_row,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 3 {
            return Err(Error::config("width", "an elementary automaton needs at least 3 cells"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.seed_row.len() != self.width {
            return Err(Error::config(
                "seed_row",
                format!("length {} differs from width {}", self.seed_row.len(), self.width),
            ));
        }
        if self.seed_row.iter().any(|&b| b > 1) {
            return Err(Error::config("seed_row", "entries must be 0 or 1"));
        }
        if self.seed_row.iter().all(|&b| b == 0) {
            return Err(Error::config("seed_row", "all-zero seed is a fixed point"));
        }
        Ok(())
    }
}

/// `width × steps` state matrix plus its ±1 image.
///
/// `states[i][t]` is cell `i` after `t + 1` updates of the seed. Column `t`
/// holds the weights linking latent channel `t` to every output channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaKernel {
    width: usize,
    steps: usize,
    states: Vec<u8>,
    mapped: Vec<i8>,
}

impl CaKernel {
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn state(&self, cell: usize, step: usize) -> u8 {
        self.states[cell * self.steps + step]
    }
    pub fn weight(&self, cell: usize, step: usize) -> i8 {
        self.mapped[cell * self.steps + step]
    }
    /// Row-major `width × steps` states.
    pub fn states(&self) -> &[u8] {
        &self.states
    }
    /// Row-major `width × steps` weights in {−1, +1}; as a `(c_out, m, 1, 1)`
    /// pointwise kernel this is already in output-major order.
    pub fn mapped(&self) -> &[i8] {
        &self.mapped
    }
    /// Column `t` of the state matrix.
    pub fn column(&self, step: usize) -> Vec<u8> {
        (0..self.width).map(|i| self.state(i, step)).collect()
    }
}

/// One synchronous update of a circular elementary automaton.
pub fn ca_step(row: &[u8], rule: u8) -> Vec<u8> {
    let w = row.len();
    assert!(w >= 3, "elementary automaton needs at least 3 cells");
    (0..w)
        .map(|i| {
            let l = row[(i + w - 1) % w];
            let c = row[i];
            let r = row[(i + 1) % w];
            let idx = (l << 2) | (c << 1) | r;
            (rule >> idx) & 1
        })
        .collect()
}

pub fn generate_kernel(cfg: &CaConfig) -> Result<CaKernel> {
    cfg.validate()?;
    let (w, m) = (cfg.width, cfg.steps);
    let mut states = vec![0u8; w * m];
    let mut row = cfg.seed_row.clone();
    for t in 0..m {
        row = ca_step(&row, cfg.rule);
        for (i, &b) in row.iter().enumerate() {
            states[i * m + t] = b;
        }
    }
    let mapped = states.iter().map(|&b| 2 * b as i8 - 1).collect();
    Ok(CaKernel {
        width: w,
        steps: m,
        states,
        mapped,
    })
}

/// Balanced pseudo-random seed row: exactly `width / 2` ones, shuffled by `rng_seed`.
pub fn default_seed(width: usize, rng_seed: u64) -> Vec<u8> {
    assert!(width >= 3, "seed rows need at least 3 cells");
    let mut row: Vec<u8> = (0..width).map(|i| u8::from(i < width / 2)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    row.shuffle(&mut rng);
    row
}

/// Renders the state matrix one cell per line, each line the cell's history.
pub fn render_states(kernel: &CaKernel) -> String {
    let mut out = String::with_capacity(kernel.width * (kernel.steps + 1));
    for i in 0..kernel.width {
        for t in 0..kernel.steps {
            out.push(if kernel.state(i, t) == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

pub fn parse_bits(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(Error::config("seed", format!("unexpected character {other:?}"))),
        })
        .collect()
}
