//! Count-based `P(y|x)` and backdoor-adjusted `P(y|do(x)) = sum_z P(y|x,z) P(z)`
//! over a sparse co-occurrence table.
//!
//! Marginals are always recomputed from the sparse entries:
//! `N(x) = sum_{y,z} N(x,y,z)`, `N(z) = sum_{x,y} N(x,y,z)`, and
//! `P(z) = N(z) / N_total`. A stratum with `N(x,z) = 0` has no estimate of
//! `P(y|x,z)`; it is skipped and the remaining priors are renormalised.

mod report;

pub use report::{render_table, report, PairReport, ReportRow};

use crate::corpus::{read_jsonl, StatsRecord};
use crate::error::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Counting {
    /// One increment per distinct (x, y, z) per record.
    #[default]
    Presence,
    /// One increment per occurrence combination.
    Multiplicity,
}

#[derive(Clone, Debug, Default)]
struct Symbols {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Symbols {
    fn from_names(names: &[String]) -> Self {
        let mut s = Self::default();
        for n in names {
            s.intern(n);
        }
        s
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// `N(x, y, z)` as a sparse map over interned symbols.
#[derive(Clone, Debug, Default)]
pub struct CooccurrenceTable {
    xs: Symbols,
    ys: Symbols,
    zs: Symbols,
    counts: BTreeMap<(usize, usize, usize), u64>,
    strict: bool,
    counting: Counting,
}

/// An adjusted estimate with the prior mass of the strata it used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adjusted {
    pub value: f64,
    /// `sum P(z)` over defined strata; 1 when nothing was skipped.
    pub coverage: f64,
    pub strata_used: usize,
    pub strata_total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjustedExact {
    pub value: BigRational,
    pub coverage: BigRational,
    pub strata_used: usize,
    pub strata_total: usize,
}

impl CooccurrenceTable {
    /// Open vocabularies growing with the data, presence counting.
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixed vocabularies; unknown symbols are rejected on ingest.
    pub fn with_vocab(x: &[String], y: &[String], z: &[String]) -> Self {
        Self {
            xs: Symbols::from_names(x),
            ys: Symbols::from_names(y),
            zs: Symbols::from_names(z),
            strict: true,
            ..Self::default()
        }
    }

    pub fn counting(mut self, counting: Counting) -> Self {
        self.counting = counting;
        self
    }

    fn symbol(syms: &mut Symbols, strict: bool, name: &str, axis: &str) -> Result<usize> {
        match syms.get(name) {
            Some(i) => Ok(i),
            None if strict => Err(Error::validation(format!("unknown {axis} symbol {name:?}"))),
            None => Ok(syms.intern(name)),
        }
    }

    /// Adds one record.
    pub fn ingest_record(&mut self, rec: &StatsRecord) -> Result<()> {
        let strict = self.strict;
        let ids = |syms: &mut Symbols, names: &[String], axis: &str| -> Result<Vec<usize>> {
            names.iter().map(|n| Self::symbol(syms, strict, n, axis)).collect()
        };
        let mut x = ids(&mut self.xs, &rec.x, "x")?;
        let mut y = ids(&mut self.ys, &rec.y, "y")?;
        let mut z = ids(&mut self.zs, &rec.z, "z")?;
        if self.counting == Counting::Presence {
            for v in [&mut x, &mut y, &mut z] {
                v.sort_unstable();
                v.dedup();
            }
        }
        for &a in &x {
            for &b in &y {
                for &c in &z {
                    *self.counts.entry((a, b, c)).or_insert(0) += 1;
                }
            }
        }
        Ok(())
    }

    pub fn ingest<'a, I: IntoIterator<Item = &'a StatsRecord>>(&mut self, records: I) -> Result<()> {
        for r in records {
            self.ingest_record(r)?;
        }
        Ok(())
    }

    /// Reads a JSON Lines file of `{"x": [...], "y": [...], "z": [...]}`.
    pub fn ingest_file(&mut self, path: &Path) -> Result<()> {
        let records: Vec<StatsRecord> = read_jsonl(path)?;
        self.ingest(&records)
    }

    pub fn count(&self, x: &str, y: &str, z: &str) -> u64 {
        match (self.xs.get(x), self.ys.get(y), self.zs.get(z)) {
            (Some(a), Some(b), Some(c)) => self.counts.get(&(a, b, c)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn x_vocab(&self) -> &[String] {
        &self.xs.names
    }

    pub fn y_vocab(&self) -> &[String] {
        &self.ys.names
    }

    pub fn z_vocab(&self) -> &[String] {
        &self.zs.names
    }

    /// Multiplies every count by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        let mut t = self.clone();
        t.counts.values_mut().for_each(|v| *v *= k);
        t
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::validation("co-occurrence table is empty"));
        }
        Ok(())
    }

    /// Counts needed for `(x, y)`: `(N(x), N(x,y), per-z (N(z), N(x,z), N(x,y,z)))`.
    fn gather(&self, x: &str, y: &str, z_filter: Option<&BTreeSet<String>>) -> Result<Gathered> {
        self.nonempty()?;
        let xi = self.xs.get(x);
        let yi = self.ys.get(y);
        let mut g = Gathered {
            n_total: 0,
            n_x: 0,
            n_xy: 0,
            strata: BTreeMap::new(),
        };
        for (&(a, b, c), &n) in &self.counts {
            let keep = z_filter.is_none_or(|f| f.contains(&self.zs.names[c]));
            if !keep {
                continue;
            }
            g.n_total += n;
            let s = g.strata.entry(c).or_insert((0, 0, 0));
            s.0 += n;
            if Some(a) == xi {
                g.n_x += n;
                s.1 += n;
                if Some(b) == yi {
                    g.n_xy += n;
                    s.2 += n;
                }
            }
        }
        Ok(g)
    }

    /// `N(x,y) / N(x)`.
    pub fn conditional(&self, y: &str, x: &str) -> Result<f64> {
        let g = self.gather(x, y, None)?;
        if g.n_x == 0 {
            return Err(Error::UndefinedCondition(x.to_string()));
        }
        Ok(g.n_xy as f64 / g.n_x as f64)
    }

    pub fn conditional_exact(&self, y: &str, x: &str) -> Result<BigRational> {
        let g = self.gather(x, y, None)?;
        if g.n_x == 0 {
            return Err(Error::UndefinedCondition(x.to_string()));
        }
        Ok(ratio(g.n_xy, g.n_x))
    }

    /// `sum_z N(x,y,z)/N(x,z) * N(z)/N_total` over defined strata, priors
    /// renormalised over those strata.
    pub fn interventional(&self, y: &str, x: &str) -> Result<Adjusted> {
        self.interventional_within(y, x, None)
    }

    /// As [`interventional`](Self::interventional) with the strata limited
    /// to `z_vocab` (priors recomputed inside it).
    pub fn interventional_within(
        &self,
        y: &str,
        x: &str,
        z_vocab: Option<&BTreeSet<String>>,
    ) -> Result<Adjusted> {
        let e = self.interventional_exact_within(y, x, z_vocab)?;
        Ok(Adjusted {
            value: to_f64(&e.value),
            coverage: to_f64(&e.coverage),
            strata_used: e.strata_used,
            strata_total: e.strata_total,
        })
    }

    pub fn interventional_exact(&self, y: &str, x: &str) -> Result<AdjustedExact> {
        self.interventional_exact_within(y, x, None)
    }

    pub fn interventional_exact_within(
        &self,
        y: &str,
        x: &str,
        z_vocab: Option<&BTreeSet<String>>,
    ) -> Result<AdjustedExact> {
        let g = self.gather(x, y, z_vocab)?;
        if g.n_total == 0 {
            return Err(Error::UndefinedAdjustment(x.to_string()));
        }
        let mut weighted = BigRational::zero();
        let mut covered: u64 = 0;
        let mut used = 0;
        for &(n_z, n_xz, n_xyz) in g.strata.values() {
            if n_z == 0 || n_xz == 0 {
                continue;
            }
            used += 1;
            covered += n_z;
            weighted += ratio(n_xyz, n_xz) * BigRational::from_integer(BigInt::from(n_z));
        }
        if used == 0 {
            return Err(Error::UndefinedAdjustment(x.to_string()));
        }
        Ok(AdjustedExact {
            value: weighted / BigRational::from_integer(BigInt::from(covered)),
            coverage: ratio(covered, g.n_total),
            strata_used: used,
            strata_total: g.strata.len(),
        })
    }
}

struct Gathered {
    n_total: u64,
    n_x: u64,
    n_xy: u64,
    /// z -> (N(z), N(x,z), N(x,y,z))
    strata: BTreeMap<usize, (u64, u64, u64)>,
}

fn ratio(a: u64, b: u64) -> BigRational {
    BigRational::new(BigInt::from(a), BigInt::from(b))
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}
