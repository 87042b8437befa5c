//! Cooperative games over feature coalitions.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::nn::{BatchInput, MaskVector, SideTunedModel, TokenSequence};
use crate::scalar::Scalar;

/// Largest player count for which coalitions fit a `u64` bitmask.
pub const MAX_BITMASK_PLAYERS: usize = 64;

/// A value function over coalitions, possibly vector-valued (one value per class).
///
/// Coalitions are little-endian bitmasks: bit `i` set means player `i` is present.
pub trait Game {
    fn players(&self) -> usize;

    fn outputs(&self) -> usize {
        1
    }

    /// One row of `outputs()` values per coalition.
    fn evaluate(&self, coalitions: &[u64]) -> Result<Vec<Vec<f64>>>;

    fn value(&self, coalition: u64) -> Result<Vec<f64>> {
        Ok(self.evaluate(&[coalition])?.pop().expect("one row per coalition"))
    }

    fn full(&self) -> u64 {
        full_mask(self.players())
    }
}

pub fn full_mask(d: usize) -> u64 {
    if d >= 64 {
        u64::MAX
    } else {
        (1u64 << d) - 1
    }
}

/// A game defined by a closure on one coalition.
pub struct FnGame<F> {
    players: usize,
    outputs: usize,
    f: F,
}

impl<F: Fn(u64) -> Vec<f64>> FnGame<F> {
    pub fn new(players: usize, outputs: usize, f: F) -> Self {
        FnGame { players, outputs, f }
    }
}

impl<F: Fn(u64) -> Vec<f64>> Game for FnGame<F> {
    fn players(&self) -> usize {
        self.players
    }

    fn outputs(&self) -> usize {
        self.outputs
    }

    fn evaluate(&self, coalitions: &[u64]) -> Result<Vec<Vec<f64>>> {
        coalitions
            .iter()
            .map(|&s| {
                let v = (self.f)(s);
                if v.len() != self.outputs {
                    return Err(Error::contract(format!("game returned {} values, expected {}", v.len(), self.outputs)));
                }
                Ok(v)
            })
            .collect()
    }
}

/// A game stored as a full table indexed by bitmask.
#[derive(Clone, Debug)]
pub struct TableGame {
    players: usize,
    outputs: usize,
    table: Vec<Vec<f64>>,
}

impl TableGame {
    pub fn new(players: usize, table: Vec<Vec<f64>>) -> Result<Self> {
        if table.len() != 1usize << players {
            return Err(Error::contract(format!("table of {} rows for {players} players", table.len())));
        }
        let outputs = table.first().map_or(0, Vec::len);
        if table.iter().any(|r| r.len() != outputs) {
            return Err(Error::contract("ragged game table"));
        }
        Ok(TableGame { players, outputs, table })
    }

    /// Evaluate every coalition of `game` once.
    pub fn tabulate(game: &dyn Game) -> Result<Self> {
        let d = game.players();
        if d > super::MAX_EXACT_PLAYERS {
            return Err(Error::Budget(format!("{d} players exceeds the 2^{} enumeration budget", super::MAX_EXACT_PLAYERS)));
        }
        let all: Vec<u64> = (0..1u64 << d).collect();
        let mut table = Vec::with_capacity(all.len());
        for chunk in all.chunks(4096) {
            table.extend(game.evaluate(chunk)?);
        }
        TableGame::new(d, table)
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }
}

impl Game for TableGame {
    fn players(&self) -> usize {
        self.players
    }

    fn outputs(&self) -> usize {
        self.outputs
    }

    fn evaluate(&self, coalitions: &[u64]) -> Result<Vec<Vec<f64>>> {
        coalitions
            .iter()
            .map(|&s| {
                self.table
                    .get(s as usize)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("coalition {s:#x} out of range")))
            })
            .collect()
    }
}

/// Caches evaluations of an inner game by bitmask.
pub struct Memo<G> {
    inner: G,
    cache: Mutex<HashMap<u64, Vec<f64>>>,
}

impl<G: Game> Memo<G> {
    pub fn new(inner: G) -> Self {
        Memo { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("memo lock").len()
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: Game> Game for Memo<G> {
    fn players(&self) -> usize {
        self.inner.players()
    }

    fn outputs(&self) -> usize {
        self.inner.outputs()
    }

    fn evaluate(&self, coalitions: &[u64]) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<u64> = {
            let cache = self.cache.lock().expect("memo lock");
            let mut m: Vec<u64> = coalitions.iter().copied().filter(|s| !cache.contains_key(s)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let fresh = self.inner.evaluate(&missing)?;
            let mut cache = self.cache.lock().expect("memo lock");
            for (s, v) in missing.into_iter().zip(fresh) {
                cache.entry(s).or_insert(v);
            }
        }
        let cache = self.cache.lock().expect("memo lock");
        Ok(coalitions.iter().map(|s| cache[s].clone()).collect())
    }
}

/// Class probabilities of a surrogate on one input under feature removal.
pub struct SurrogateGame<'a, T> {
    model: &'a SideTunedModel<T>,
    x: &'a TokenSequence<T>,
    chunk: usize,
}

impl<'a, T: Scalar> SurrogateGame<'a, T> {
    pub fn new(model: &'a SideTunedModel<T>, x: &'a TokenSequence<T>) -> Result<Self> {
        let d = model.config().num_tokens;
        if x.num_tokens() != d {
            return Err(Error::shape("surrogate_game", format!("input has {} tokens, model expects {d}", x.num_tokens())));
        }
        if d > MAX_BITMASK_PLAYERS {
            return Err(Error::Budget(format!("{d} players do not fit a bitmask")));
        }
        Ok(SurrogateGame { model, x, chunk: 512 })
    }
}

impl<T: Scalar> Game for SurrogateGame<'_, T> {
    fn players(&self) -> usize {
        self.x.num_tokens()
    }

    fn outputs(&self) -> usize {
        self.model.config().num_classes
    }

    fn evaluate(&self, coalitions: &[u64]) -> Result<Vec<Vec<f64>>> {
        let d = self.players();
        let mut out = Vec::with_capacity(coalitions.len());
        for chunk in coalitions.chunks(self.chunk) {
            let masks: Vec<MaskVector> = chunk.iter().map(|&s| MaskVector::from_bits(s, d)).collect();
            let probs = self.model.surrogate_probs(&BatchInput::repeated(self.x, &masks)?)?;
            for r in 0..chunk.len() {
                out.push(probs.row(r).iter().map(|v| v.as_f64()).collect());
            }
        }
        Ok(out)
    }
}
