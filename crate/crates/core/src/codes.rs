//! Cyclic-support gradient codes.
//!
//! An `n x n` encoding matrix `B` assigns partition `j` to worker `i` with
//! weight `B[i][j]`; row `i` is supported on columns `i, i+1, ..., i+s (mod n)`.
//! For any set `F` of at least `n - s` surviving workers there is a row vector
//! `a` supported on `F` with `a B = 1`, so the parent recovers the plain sum of
//! all partition gradients from the survivors alone.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Maximum accepted `|a B - 1|_inf` for a decode row.
pub const DECODE_TOLERANCE: f64 = 1e-8;
/// Residuals above this (but within [`DECODE_TOLERANCE`]) are logged as ill-conditioned.
pub const CONDITION_WARN: f64 = 1e-10;
const MAX_ATTEMPTS: u32 = 8;

#[derive(Clone, PartialEq)]
pub struct EncodingMatrix {
    n: usize,
    s: usize,
    /// Row-major `n x n`.
    entries: Vec<f64>,
}

impl fmt::Debug for EncodingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncodingMatrix")
            .field("n", &self.n)
            .field("s", &self.s)
            .field("rows", &self.rows().collect::<Vec<_>>())
            .finish()
    }
}

impl EncodingMatrix {
    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        EncodingMatrix { n, s: 0, entries }
    }

    /// Wraps explicit rows, checking shape and the cyclic support pattern. Recoverability
    /// is not checked here; see [`validate_code`].
    pub fn from_rows(s: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || s >= n {
            return Err(Error::InvalidParameters(format!(
                "need 0 <= s < n, got n={n}, s={s}"
            )));
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidParameters(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidParameters(format!("entry ({i},{j}) is not finite")));
                }
                if v != 0.0 && (j + n - i) % n > s {
                    return Err(Error::InvalidParameters(format!(
                        "entry ({i},{j}) lies outside the cyclic support of width {}",
                        s + 1
                    )));
                }
            }
            entries.extend_from_slice(row);
        }
        Ok(EncodingMatrix { n, s, entries })
    }

    /// The hand-built `(n, s) = (3, 1)` code used in worked examples:
    /// `[[1/2, 1, 0], [0, 1, -1], [1/2, 0, 1]]`.
    pub fn three_one_example() -> Self {
        Self::from_rows(
            1,
            vec![
                vec![0.5, 1.0, 0.0],
                vec![0.0, 1.0, -1.0],
                vec![0.5, 0.0, 1.0],
            ],
        )
        .expect("example code is well formed")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.n..(row + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks(self.n)
    }

    /// Columns of row `i` inside its cyclic window, in window order.
    pub fn support(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        (0..=self.s).map(move |t| (row + t) % self.n)
    }

    /// Row-major CSV, one matrix row per line, shortest round-trip decimal.
    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for row in self.rows() {
            writer.write_record(row.iter().map(|v| v.to_string()))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, s: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|field| {
                    field
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad matrix entry `{field}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(s, rows)
    }
}

/// Builds a random cyclic-support code for `n` workers tolerating `s` stragglers.
///
/// Draws an `s x n` Gaussian matrix `H` with `H 1 = 0` and puts every row of
/// `B` in the null space of `H`, fixing the leading support entry to 1. Any
/// `n - s` rows then span that null space, which contains the ones vector. A
/// singular solve or a failed validation redraws `H` from `seed + attempt`.
pub fn build_encoding(n: usize, s: usize, seed: u64) -> Result<EncodingMatrix> {
    if n == 0 || s >= n {
        return Err(Error::InvalidParameters(format!(
            "need 0 <= s < n, got n={n}, s={s}"
        )));
    }
    if s == 0 {
        return Ok(EncodingMatrix::identity(n));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let mut h = DMatrix::<f64>::zeros(s, n);
        for r in 0..s {
            let mut sum = 0.0;
            for c in 0..n - 1 {
                let v: f64 = StandardNormal.sample(&mut rng);
                h[(r, c)] = v;
                sum += v;
            }
            h[(r, n - 1)] = -sum;
        }

        let mut entries = vec![0.0; n * n];
        let mut singular = false;
        for i in 0..n {
            let cols: Vec<usize> = (0..=s).map(|t| (i + t) % n).collect();
            let system = DMatrix::from_fn(s, s, |r, c| h[(r, cols[c + 1])]);
            let rhs = DVector::from_fn(s, |r, _| -h[(r, cols[0])]);
            match system.lu().solve(&rhs) {
                Some(x) if x.iter().all(|v| v.is_finite()) => {
                    entries[i * n + cols[0]] = 1.0;
                    for t in 0..s {
                        entries[i * n + cols[t + 1]] = x[t];
                    }
                }
                _ => {
                    singular = true;
                    break;
                }
            }
        }
        if singular {
            log::debug!("singular support system for (n={n}, s={s}) at attempt {attempt}");
            continue;
        }
        let code = EncodingMatrix { n, s, entries };
        if validate_code(&code).is_valid() {
            return Ok(code);
        }
        log::debug!("generated code for (n={n}, s={s}) failed validation at attempt {attempt}");
    }
    Err(Error::EncodingFailed {
        n,
        s,
        attempts: MAX_ATTEMPTS,
    })
}

/// Combining coefficients for one survivor set.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRow {
    coefficients: Vec<f64>,
    survivors: Vec<usize>,
    residual: f64,
}

impl DecodeRow {
    /// Length-`n` coefficients, zero outside the survivor set.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Sorted 0-based survivor positions.
    pub fn survivors(&self) -> &[usize] {
        &self.survivors
    }

    /// `|a B - 1|_inf` as measured when the row was solved.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// `sum_j a_j * messages[j]` over survivors, in survivor order. `message(j)`
    /// supplies the vector of worker `j`.
    pub fn combine<'a>(&self, dim: usize, message: impl Fn(usize) -> &'a [f64]) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &j in &self.survivors {
            let a = self.coefficients[j];
            for (o, m) in out.iter_mut().zip(message(j)) {
                *o += a * m;
            }
        }
        out
    }
}

/// Minimum-norm `a` supported on `survivors` (0-based worker positions) with
/// `a B = 1`.
pub fn decode_row(code: &EncodingMatrix, survivors: &[usize]) -> Result<DecodeRow> {
    let n = code.n;
    let mut set = survivors.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.len() != survivors.len() || set.last().is_some_and(|&j| j >= n) {
        return Err(Error::InvalidParameters(format!(
            "survivor set {survivors:?} must hold distinct positions below {n}"
        )));
    }
    if set.len() < n - code.s {
        return Err(Error::CodeInvalid {
            survivors: set,
            residual: f64::INFINITY,
        });
    }

    // B_F^T x = 1, least squares with minimum norm.
    let system = DMatrix::from_fn(n, set.len(), |col, k| code.get(set[k], col));
    let ones = DVector::from_element(n, 1.0);
    let svd = system.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1.0);
    let x = svd.solve(&ones, eps).map_err(|e| Error::Parse(e.to_string()))?;

    let mut coefficients = vec![0.0; n];
    for (k, &j) in set.iter().enumerate() {
        coefficients[j] = x[k];
    }
    let residual = (0..n)
        .map(|col| {
            let v: f64 = set.iter().map(|&j| coefficients[j] * code.get(j, col)).sum();
            (v - 1.0).abs()
        })
        .fold(0.0, f64::max);
    if !(residual <= DECODE_TOLERANCE) {
        return Err(Error::CodeInvalid {
            survivors: set,
            residual,
        });
    }
    if residual > CONDITION_WARN {
        log::warn!("decode row for survivors {set:?} has residual {residual:e}");
    }
    Ok(DecodeRow {
        coefficients,
        survivors: set,
        residual,
    })
}

/// Outcome of the exhaustive survivor-set check.
#[derive(Clone, Debug, PartialEq)]
pub enum CodeCheck {
    Valid { sets_checked: usize, max_residual: f64 },
    Invalid { survivors: Vec<usize>, residual: f64 },
}

impl CodeCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, CodeCheck::Valid { .. })
    }
}

/// Visits every `k`-subset of `0..n` in lexicographic order; stops early when `f` returns false.
pub(crate) fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> bool) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if !f(&idx) {
            return;
        }
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Solves a decode row for every survivor set of size exactly `n - s`.
pub fn validate_code(code: &EncodingMatrix) -> CodeCheck {
    let mut sets_checked = 0;
    let mut max_residual: f64 = 0.0;
    let mut failure = None;
    for_each_combination(code.n, code.n - code.s, |set| match decode_row(code, set) {
        Ok(row) => {
            sets_checked += 1;
            max_residual = max_residual.max(row.residual);
            true
        }
        Err(err) => {
            let residual = match err {
                Error::CodeInvalid { residual, .. } => residual,
                _ => f64::NAN,
            };
            failure = Some(CodeCheck::Invalid {
                survivors: set.to_vec(),
                residual,
            });
            false
        }
    });
    failure.unwrap_or(CodeCheck::Valid {
        sets_checked,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times_b(a: &[f64], code: &EncodingMatrix) -> Vec<f64> {
        (0..code.n())
            .map(|c| (0..code.n()).map(|r| a[r] * code.get(r, c)).sum())
            .collect()
    }

    #[test]
    fn zero_tolerance_is_identity() {
        let code = build_encoding(3, 0, 99).unwrap();
        assert_eq!(code, EncodingMatrix::identity(3));
        let row = decode_row(&code, &[0, 1, 2]).unwrap();
        assert_eq!(row.coefficients(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn generated_three_one_has_cyclic_support() {
        let code = build_encoding(3, 1, 7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let inside = j == i || j == (i + 1) % 3;
                assert_eq!(code.get(i, j) != 0.0, inside, "entry ({i},{j})");
            }
            assert_eq!(code.get(i, i), 1.0);
        }
        assert!(validate_code(&code).is_valid());
    }

    #[test]
    fn example_code_decodes_every_pair() {
        let code = EncodingMatrix::three_one_example();
        assert!(validate_code(&code).is_valid());
        let expected = [
            (vec![1, 2], [0.0, 1.0, 2.0]),
            (vec![0, 2], [1.0, 0.0, 1.0]),
            (vec![0, 1], [2.0, -1.0, 0.0]),
        ];
        for (set, a) in expected {
            let row = decode_row(&code, &set).unwrap();
            for (got, want) in row.coefficients().iter().zip(a) {
                assert!((got - want).abs() < 1e-12, "{set:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn full_survivor_set_is_min_norm_solution() {
        let code = EncodingMatrix::three_one_example();
        let row = decode_row(&code, &[0, 1, 2]).unwrap();
        let ab = times_b(row.coefficients(), &code);
        assert!(ab.iter().all(|v| (v - 1.0).abs() < 1e-10));
        // every solution is x0 + t*z with z spanning the left null space of B
        let unique_norm = [0.0f64, 1.0, 2.0].iter().map(|v| v * v).sum::<f64>();
        let norm = row.coefficients().iter().map(|v| v * v).sum::<f64>();
        assert!(norm <= unique_norm + 1e-12);
    }

    #[test]
    fn identity_claiming_redundancy_fails() {
        let mut code = EncodingMatrix::identity(3);
        code.s = 1;
        match validate_code(&code) {
            CodeCheck::Invalid { survivors, .. } => assert_eq!(survivors, vec![0, 1]),
            CodeCheck::Valid { .. } => panic!("identity cannot tolerate a straggler"),
        }
        match decode_row(&code, &[1, 2]) {
            Err(Error::CodeInvalid { survivors, .. }) => assert_eq!(survivors, vec![1, 2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_survivors_rejected() {
        let code = EncodingMatrix::three_one_example();
        assert!(matches!(decode_row(&code, &[2]), Err(Error::CodeInvalid { .. })));
        assert!(decode_row(&code, &[0, 0]).is_err());
        assert!(decode_row(&code, &[0, 3]).is_err());
    }

    #[test]
    fn twelve_three_exhaustive() {
        let code = build_encoding(12, 3, 5).unwrap();
        match validate_code(&code) {
            CodeCheck::Valid { sets_checked, .. } => assert_eq!(sets_checked, 220),
            other => panic!("{other:?}"),
        }
        for c in 0..12 {
            let nonzeros = (0..12).filter(|&r| code.get(r, c) != 0.0).count();
            assert_eq!(nonzeros, 4);
        }
    }

    #[test]
    fn support_violation_rejected() {
        let err = EncodingMatrix::from_rows(1, vec![vec![1.0, 0.0, 1.0]; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidParameters(_)));
        assert!(build_encoding(3, 3, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let code = build_encoding(6, 2, 21).unwrap();
        let text = code.to_csv().unwrap();
        assert_eq!(EncodingMatrix::from_csv(&text, 2).unwrap(), code);
    }

    #[test]
    fn combinations_enumerated() {
        let mut count = 0;
        for_each_combination(5, 3, |_| {
            count += 1;
            true
        });
        assert_eq!(count, 10);
        let mut all = Vec::new();
        for_each_combination(3, 3, |c| {
            all.push(c.to_vec());
            true
        });
        assert_eq!(all, vec![vec![0, 1, 2]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn generated_codes_decode_all_sets(n in 2usize..9, s_frac in 0.0f64..1.0, seed in any::<u64>()) {
                let s = ((n as f64 - 1.0) * s_frac) as usize;
                let code = build_encoding(n, s, seed).unwrap();
                let mut ok = true;
                for_each_combination(n, n - s, |set| {
                    let row = decode_row(&code, set).unwrap();
                    let ab = times_b(row.coefficients(), &code);
                    ok &= ab.iter().all(|v| (v - 1.0).abs() <= DECODE_TOLERANCE);
                    ok &= (0..n).all(|j| set.contains(&j) || row.coefficients()[j] == 0.0);
                    ok &= decode_row(&code, set).unwrap() == row;
                    ok
                });
                prop_assert!(ok);
            }
        }
    }
}
