//! Probabilistic differential testing.
//!
//! Random inputs are generated from `(seed, sample index)`, both kernels run
//! on the interpreter, and the output buffer is compared bit for bit. Passing
//! any finite number of samples is evidence, not proof, that two schedules
//! are equivalent.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::Kernel;
use crate::machine::{execute, is_interpretable, InterpretError, InterpretOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemKind {
    Int32,
    Int8,
}

impl ElemKind {
    pub fn bytes(self) -> usize {
        match self {
            ElemKind::Int32 => 4,
            ElemKind::Int8 => 1,
        }
    }

    fn bounds(self) -> (i64, i64) {
        match self {
            ElemKind::Int32 => (i32::MIN.into(), i32::MAX.into()),
            ElemKind::Int8 => (i8::MIN.into(), i8::MAX.into()),
        }
    }

    fn decode(self, cell: &[u8]) -> i64 {
        match self {
            ElemKind::Int32 => i32::from_le_bytes(cell.try_into().expect("4-byte cell")).into(),
            ElemKind::Int8 => (cell[0] as i8).into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform over every value of the element type.
    #[default]
    Full,
    /// Uniform over `lo..=hi`.
    Range { lo: i64, hi: i64 },
    /// All zeros; for output buffers.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSpec {
    pub arg: usize,
    /// Length in elements.
    pub len: usize,
    pub kind: ElemKind,
    #[serde(default)]
    pub dist: Distribution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPlan {
    /// Argument index of the buffer whose final contents are compared.
    pub ret_ptr: usize,
    pub buffers: Vec<BufferSpec>,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sample_count() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TestError {
    #[error("invalid test plan: {0}")]
    InvalidPlan(String),
    #[error("{which} kernel cannot be interpreted: {error}")]
    Unsupported { which: &'static str, error: InterpretError },
    #[error("reference kernel failed on sample {sample}: {error}")]
    ReferenceFailed { sample: usize, error: InterpretError },
}

impl TestPlan {
    pub fn validate(&self) -> Result<(), TestError> {
        let bad = |m: String| Err(TestError::InvalidPlan(m));
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for b in &self.buffers {
            if !seen.insert(b.arg) {
                return bad(format!("argument {} declared twice", b.arg));
            }
            if let Distribution::Range { lo, hi } = b.dist {
                let (min, max) = b.kind.bounds();
                if lo > hi || lo < min || hi > max {
                    return bad(format!("range {lo}..={hi} does not fit argument {}", b.arg));
                }
            }
        }
        if !seen.contains(&self.ret_ptr) {
            return bad(format!("ret_ptr {} is not a declared buffer", self.ret_ptr));
        }
        Ok(())
    }

    fn ret_kind(&self) -> ElemKind {
        self.buffers
            .iter()
            .find(|b| b.arg == self.ret_ptr)
            .map_or(ElemKind::Int32, |b| b.kind)
    }

    /// Input buffers of one sample. Depends only on `(seed, sample)`.
    pub fn inputs(&self, sample: usize) -> BTreeMap<usize, Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample as u64);
        self.buffers
            .iter()
            .map(|b| {
                let mut bytes = vec![0u8; b.len * b.kind.bytes()];
                match b.dist {
                    Distribution::Zero => {}
                    Distribution::Full => rng.fill(bytes.as_mut_slice()),
                    Distribution::Range { lo, hi } => {
                        for cell in bytes.chunks_exact_mut(b.kind.bytes()) {
                            let v = rng.gen_range(lo..=hi);
                            cell.copy_from_slice(&v.to_le_bytes()[..cell.len()]);
                        }
                    }
                }
                (b.arg, bytes)
            })
            .collect()
    }
}

/// The first observed difference between reference and mutant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub sample: usize,
    /// Element index of the first differing output cell.
    pub cell: Option<usize>,
    pub expected: Option<i64>,
    pub actual: Option<i64>,
    /// Set when the mutant faulted instead of producing output.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TestVerdict {
    pub passed: usize,
    pub failed: usize,
    pub first_failure: Option<Mismatch>,
}

impl TestVerdict {
    pub fn is_pass(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after the first failing sample.
    pub fail_fast: bool,
    pub interp: InterpretOptions,
}

/// Samples evaluated per parallel batch. Early exit happens between batches.
const CHUNK: usize = 256;

fn run_output(
    k: &Kernel,
    plan: &TestPlan,
    sample: usize,
    opts: &InterpretOptions,
) -> Result<Vec<u8>, InterpretError> {
    let mut out = execute(k, &plan.inputs(sample), opts)?;
    Ok(out.remove(&plan.ret_ptr).unwrap_or_default())
}

fn compare(plan: &TestPlan, sample: usize, expected: &[u8], actual: &Result<Vec<u8>, InterpretError>) -> Option<Mismatch> {
    let actual = match actual {
        Ok(a) => a,
        Err(e) => {
            return Some(Mismatch {
                sample,
                cell: None,
                expected: None,
                actual: None,
                error: Some(e.to_string()),
            })
        }
    };
    if actual == expected {
        return None;
    }
    let kind = plan.ret_kind();
    let cells = |b: &[u8]| b.chunks(kind.bytes()).map(|c| c.to_vec()).collect::<Vec<_>>();
    let (e, a) = (cells(expected), cells(actual));
    let cell = (0..e.len().max(a.len()))
        .find(|&i| e.get(i) != a.get(i))
        .expect("buffers differ");
    let value = |v: &Vec<Vec<u8>>| v.get(cell).filter(|c| c.len() == kind.bytes()).map(|c| kind.decode(c));
    Some(Mismatch {
        sample,
        cell: Some(cell),
        expected: value(&e),
        actual: value(&a),
        error: None,
    })
}

fn check_kernels(reference: &Kernel, mutant: &Kernel) -> Result<(), TestError> {
    is_interpretable(reference).map_err(|error| TestError::Unsupported {
        which: "reference",
        error,
    })?;
    is_interpretable(mutant).map_err(|error| TestError::Unsupported { which: "mutant", error })
}

/// Differential test of `mutant` against `reference` over `plan.sample_count`
/// samples. An error means the verdict is inconclusive, not that the mutant
/// failed.
pub fn run_tests(
    reference: &Kernel,
    mutant: &Kernel,
    plan: &TestPlan,
    opts: &RunOptions,
) -> Result<TestVerdict, TestError> {
    plan.validate()?;
    check_kernels(reference, mutant)?;

    let mut passed = 0;
    let mut failed = 0;
    let mut first_failure = None;
    let mut start = 0;
    while start < plan.sample_count {
        let end = (start + CHUNK).min(plan.sample_count);
        let results: Vec<Result<Option<Mismatch>, TestError>> = (start..end)
            .into_par_iter()
            .map(|s| {
                let expected = run_output(reference, plan, s, &opts.interp)
                    .map_err(|error| TestError::ReferenceFailed { sample: s, error })?;
                Ok(compare(plan, s, &expected, &run_output(mutant, plan, s, &opts.interp)))
            })
            .collect();
        for r in results {
            match r? {
                None => passed += 1,
                Some(m) => {
                    failed += 1;
                    if first_failure.is_none() {
                        first_failure = Some(m);
                    }
                    if opts.fail_fast {
                        return Ok(TestVerdict {
                            passed,
                            failed,
                            first_failure,
                        });
                    }
                }
            }
        }
        start = end;
    }
    Ok(TestVerdict {
        passed,
        failed,
        first_failure,
    })
}

/// For each budget `b`, how many mutants show no failure in samples `0..b`.
///
/// Every mutant sees the same sample stream, so the curve never increases.
pub fn pass_curve(
    reference: &Kernel,
    mutants: &[Kernel],
    budgets: &[usize],
    plan: &TestPlan,
    interp: &InterpretOptions,
) -> Result<Vec<(usize, usize)>, TestError> {
    plan.validate()?;
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(TestError::InvalidPlan("budgets must be ascending".into()));
    }
    for m in mutants {
        check_kernels(reference, m)?;
    }
    let limit = budgets.last().copied().unwrap_or(0);
    let first = first_failures(reference, mutants, limit, plan, interp)?;
    Ok(budgets
        .iter()
        .map(|&b| (b, first.iter().filter(|f| f.is_none_or(|i| i >= b)).count()))
        .collect())
}

/// Index of each mutant's first failing sample below `limit`.
pub fn first_failures(
    reference: &Kernel,
    mutants: &[Kernel],
    limit: usize,
    plan: &TestPlan,
    interp: &InterpretOptions,
) -> Result<Vec<Option<usize>>, TestError> {
    let mut first = vec![None; mutants.len()];
    let mut start = 0;
    while start < limit && first.iter().any(Option::is_none) {
        let end = (start + CHUNK).min(limit);
        let expected = (start..end)
            .into_par_iter()
            .map(|s| {
                run_output(reference, plan, s, interp).map_err(|error| TestError::ReferenceFailed { sample: s, error })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let found: Vec<(usize, Option<usize>)> = first
            .par_iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(i, _)| {
                let hit = (start..end).find(|&s| {
                    let actual = run_output(&mutants[i], plan, s, interp);
                    compare(plan, s, &expected[s - start], &actual).is_some()
                });
                (i, hit)
            })
            .collect();
        for (i, hit) in found {
            first[i] = hit;
        }
        start = end;
    }
    Ok(first)
}

/// Pass/fail/inconclusive answer for one candidate during search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Check {
    Pass,
    Fail,
    Inconclusive(String),
}

/// Correctness gate consulted by the annealer for each proposed schedule.
pub trait Tester: Sync {
    fn check(&self, reference: &Kernel, candidate: &Kernel) -> Check;
}

/// [`Tester`] backed by [`run_tests`] in fail-fast mode.
#[derive(Debug, Clone)]
pub struct DifferentialTester {
    pub plan: TestPlan,
    pub interp: InterpretOptions,
}

impl Tester for DifferentialTester {
    fn check(&self, reference: &Kernel, candidate: &Kernel) -> Check {
        let opts = RunOptions {
            fail_fast: true,
            interp: self.interp.clone(),
        };
        match run_tests(reference, candidate, &self.plan, &opts) {
            Ok(v) if v.is_pass() => Check::Pass,
            Ok(_) => Check::Fail,
            Err(e) => Check::Inconclusive(e.to_string()),
        }
    }
}
