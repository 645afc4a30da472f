//! Caching / index-coding instances and their completion-problem encoding.
//!
//! A [`CachingInstance`] describes K messages, per-message stream counts Q_i,
//! and a set of destinations, each with a desired set M_k and a cached set V_k
//! (disjoint from M_k). [`CompletionProblem`] compiles the instance into the
//! affine constraint P_Omega(X) = J on an M x Q matrix: one block row of Q_i
//! scalar rows per (destination k, desired message i), one block column of Q_j
//! scalar columns per message j. A block (k,i) observes exactly the columns of
//! messages not cached at k; the (i,i) block is pinned to the identity and
//! every other observed block to zero. Any completion of rank N yields a
//! delivery scheme over N channel uses.
//!
//! Message indices are 0-based in memory. The instance file format is 1-based;
//! conversion happens only at the parse/write boundary.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One destination: the messages it wants and the messages it has cached.
///
/// Both sets are kept sorted and deduplicated; `desired` and `cached` are
/// disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Destination {
    desired: Vec<usize>,
    cached: Vec<usize>,
}

impl Destination {
    /// Desired message indices, sorted ascending (0-based).
    pub fn desired(&self) -> &[usize] {
        &self.desired
    }

    /// Cached message indices, sorted ascending (0-based).
    pub fn cached(&self) -> &[usize] {
        &self.cached
    }

    pub fn caches(&self, message: usize) -> bool {
        self.cached.binary_search(&message).is_ok()
    }
}

/// A validated caching problem: K messages with stream counts and a list of
/// destinations. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachingInstance {
    streams: Vec<usize>,
    destinations: Vec<Destination>,
}

impl CachingInstance {
    /// Validates and builds an instance from raw (0-based) index lists.
    ///
    /// Rejects out-of-range indices, empty desired sets, overlapping
    /// desired/cached sets, and stream counts below one. Duplicate indices
    /// within a set are collapsed.
    pub fn new(
        message_count: usize,
        streams: Vec<usize>,
        destinations: Vec<(Vec<usize>, Vec<usize>)>,
    ) -> Result<Self> {
        if streams.len() != message_count {
            return Err(Error::Range(format!(
                "streams has length {}, expected K = {}",
                streams.len(),
                message_count
            )));
        }
        for (i, &q) in streams.iter().enumerate() {
            if q == 0 {
                return Err(Error::BadStreamCount { message: i + 1 });
            }
        }
        let mut dests = Vec::with_capacity(destinations.len());
        for (k, (desired, cached)) in destinations.into_iter().enumerate() {
            let desired = canonical_set(desired);
            let cached = canonical_set(cached);
            for &i in desired.iter().chain(cached.iter()) {
                if i >= message_count {
                    return Err(Error::IndexOutOfRange {
                        destination: k + 1,
                        index: i + 1,
                        k: message_count,
                    });
                }
            }
            if desired.is_empty() {
                return Err(Error::EmptyDesired { destination: k + 1 });
            }
            if let Some(&m) = desired.iter().find(|i| cached.binary_search(i).is_ok()) {
                return Err(Error::Overlap {
                    destination: k + 1,
                    message: m + 1,
                });
            }
            dests.push(Destination { desired, cached });
        }
        Ok(Self {
            streams,
            destinations: dests,
        })
    }

    /// Number of messages K.
    pub fn message_count(&self) -> usize {
        self.streams.len()
    }

    /// Per-message stream counts Q_i.
    pub fn streams(&self) -> &[usize] {
        &self.streams
    }

    pub fn destinations(&self) -> &[Destination] {
        &self.destinations
    }

    /// True when every message carries the same number of streams.
    pub fn uniform_streams(&self) -> Option<usize> {
        let q0 = self.streams[0];
        self.streams.iter().all(|&q| q == q0).then_some(q0)
    }

    /// Random unicast instance: destination k desires exactly message k and
    /// caches `cache_size` other messages drawn uniformly without replacement.
    /// Deterministic for a fixed seed.
    pub fn random_unicast(
        message_count: usize,
        cache_size: usize,
        streams_per_message: usize,
        seed: u64,
    ) -> Result<Self> {
        if message_count == 0 {
            return Err(Error::Range("K must be >= 1".into()));
        }
        if cache_size >= message_count {
            return Err(Error::Range(format!(
                "cache size {cache_size} must be < K = {message_count}"
            )));
        }
        if streams_per_message == 0 {
            return Err(Error::BadStreamCount { message: 1 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut destinations = Vec::with_capacity(message_count);
        for k in 0..message_count {
            let mut candidates: Vec<usize> = (0..message_count).filter(|&j| j != k).collect();
            // Partial Fisher-Yates: the first `cache_size` entries are a
            // uniform sample without replacement.
            for i in 0..cache_size {
                let j = rng.random_range(i..candidates.len());
                candidates.swap(i, j);
            }
            candidates.truncate(cache_size);
            destinations.push((vec![k], candidates));
        }
        Self::new(
            message_count,
            vec![streams_per_message; message_count],
            destinations,
        )
    }

    /// Parses the 1-based instance file format (see crate docs).
    pub fn from_text(text: &str) -> Result<Self> {
        let raw: RawInstance =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let shift = |v: Vec<usize>, dest: usize| -> Result<Vec<usize>> {
            v.into_iter()
                .map(|i| {
                    if i == 0 {
                        Err(Error::IndexOutOfRange {
                            destination: dest,
                            index: 0,
                            k: raw.k,
                        })
                    } else {
                        Ok(i - 1)
                    }
                })
                .collect()
        };
        let mut destinations = Vec::with_capacity(raw.destinations.len());
        for (k, d) in raw.destinations.into_iter().enumerate() {
            destinations.push((shift(d.desired, k + 1)?, shift(d.cached, k + 1)?));
        }
        Self::new(raw.k, raw.streams, destinations)
    }

    /// Writes the canonical 1-based text form. `from_text` round-trips it.
    pub fn to_text(&self) -> String {
        let raw = RawInstance {
            k: self.message_count(),
            streams: self.streams.clone(),
            destinations: self
                .destinations
                .iter()
                .map(|d| RawDestination {
                    desired: d.desired.iter().map(|i| i + 1).collect(),
                    cached: d.cached.iter().map(|i| i + 1).collect(),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("instance serialization cannot fail")
    }
}

fn canonical_set(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    k: usize,
    streams: Vec<usize>,
    destinations: Vec<RawDestination>,
}

#[derive(Serialize, Deserialize)]
struct RawDestination {
    desired: Vec<usize>,
    cached: Vec<usize>,
}

/// A contiguous run of scalar rows belonging to one (destination, desired
/// message) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowBlock {
    pub start: usize,
    pub len: usize,
    pub destination: usize,
    pub message: usize,
}

/// A contiguous run of scalar columns belonging to one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColBlock {
    pub start: usize,
    pub len: usize,
    pub message: usize,
}

/// The completion-problem encoding of an instance: the observed set Omega as
/// scalar (row, col) pairs sorted lexicographically, the target values of J on
/// Omega, and the block maps needed to decode a completion back into
/// communication objects.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionProblem {
    nrows: usize,
    ncols: usize,
    omega: Vec<(usize, usize)>,
    target: Vec<f64>,
    row_blocks: Vec<RowBlock>,
    col_blocks: Vec<ColBlock>,
}

impl CompletionProblem {
    /// Compiles an instance into its observed set and target values.
    ///
    /// Block rows are ordered by destination index, then by desired message
    /// index; block columns by message index. Block (k,i) observes column
    /// block j exactly when j is not cached at k, with target I on j = i and
    /// zero on every other observed block. Pure function of the instance.
    pub fn from_instance(inst: &CachingInstance) -> Self {
        let k_count = inst.message_count();
        let mut col_blocks = Vec::with_capacity(k_count);
        let mut col_start = 0;
        for (j, &q) in inst.streams().iter().enumerate() {
            col_blocks.push(ColBlock {
                start: col_start,
                len: q,
                message: j,
            });
            col_start += q;
        }
        let ncols = col_start;

        let mut row_blocks = Vec::new();
        let mut row_start = 0;
        for (k, dest) in inst.destinations().iter().enumerate() {
            for &i in dest.desired() {
                row_blocks.push(RowBlock {
                    start: row_start,
                    len: inst.streams()[i],
                    destination: k,
                    message: i,
                });
                row_start += inst.streams()[i];
            }
        }
        let nrows = row_start;

        let mut omega = Vec::new();
        let mut target = Vec::new();
        for rb in &row_blocks {
            let dest = &inst.destinations()[rb.destination];
            for local_row in 0..rb.len {
                let row = rb.start + local_row;
                for cb in &col_blocks {
                    if dest.caches(cb.message) {
                        continue;
                    }
                    for local_col in 0..cb.len {
                        omega.push((row, cb.start + local_col));
                        let on_diagonal = cb.message == rb.message && local_col == local_row;
                        target.push(if on_diagonal { 1.0 } else { 0.0 });
                    }
                }
            }
        }

        Self {
            nrows,
            ncols,
            omega,
            target,
            row_blocks,
            col_blocks,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Observed scalar entries, sorted by (row, col).
    pub fn omega(&self) -> &[(usize, usize)] {
        &self.omega
    }

    /// Target values of J aligned with [`Self::omega`].
    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn row_blocks(&self) -> &[RowBlock] {
        &self.row_blocks
    }

    pub fn col_blocks(&self) -> &[ColBlock] {
        &self.col_blocks
    }

    /// The same observed set with replaced target values. Useful for masked
    /// least-squares problems whose right-hand side is not an instance
    /// encoding (synthetic targets in tests and benchmarks).
    pub fn with_target(&self, target: Vec<f64>) -> Self {
        assert_eq!(target.len(), self.omega.len());
        Self {
            target,
            ..self.clone()
        }
    }

    /// Frobenius norm of J.
    pub fn target_norm(&self) -> f64 {
        self.target.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The M x Q matrix equal to J on Omega and zero elsewhere.
    pub fn dense_target(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (idx, &(i, j)) in self.omega.iter().enumerate() {
            m[(i, j)] = self.target[idx];
        }
        m
    }

    /// P_Omega of a dense matrix, as values aligned with [`Self::omega`].
    pub fn observed_of_dense(&self, m: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dims(m.nrows(), m.ncols())?;
        Ok(self.omega.iter().map(|&(i, j)| m[(i, j)]).collect())
    }

    /// Reference evaluation of the objective on a dense matrix.
    pub fn cost_of_dense(&self, m: &DMatrix<f64>) -> Result<f64> {
        let vals = self.observed_of_dense(m)?;
        Ok(0.5
            * vals
                .iter()
                .zip(&self.target)
                .map(|(x, j)| (x - j) * (x - j))
                .sum::<f64>())
    }

    pub(crate) fn check_dims(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.nrows || cols != self.ncols {
            return Err(Error::DimensionMismatch {
                expected_rows: self.nrows,
                expected_cols: self.ncols,
                rows,
                cols,
            });
        }
        Ok(())
    }
}

/// The five-message instance used throughout the tests: unicast, with
/// side-information sets {2,5}, {1,5}, {2,4}, {2,3}, {1,3,4} (1-based).
/// Its minimum rank is 2, certified by an explicit factorization.
pub fn five_message_example() -> CachingInstance {
    CachingInstance::new(
        5,
        vec![1; 5],
        vec![
            (vec![0], vec![1, 4]),
            (vec![1], vec![0, 4]),
            (vec![2], vec![1, 3]),
            (vec![3], vec![1, 2]),
            (vec![4], vec![0, 2, 3]),
        ],
    )
    .expect("example instance is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_message_instance_is_valid() {
        let inst = five_message_example();
        assert_eq!(inst.message_count(), 5);
        assert_eq!(inst.destinations().len(), 5);
        assert_eq!(inst.destinations()[0].cached(), &[1, 4]);
    }

    #[test]
    fn no_cache_instance_is_valid() {
        let inst =
            CachingInstance::new(2, vec![1, 1], vec![(vec![0], vec![]), (vec![1], vec![])])
                .unwrap();
        assert!(inst.destinations().iter().all(|d| d.cached().is_empty()));
    }

    #[test]
    fn overlap_is_rejected() {
        let err = CachingInstance::new(
            3,
            vec![1, 1, 1],
            vec![(vec![0], vec![0, 1]), (vec![1], vec![]), (vec![2], vec![])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Overlap { destination: 1, .. }));
    }

    #[test]
    fn out_of_range_and_empty_desired_are_rejected() {
        let err = CachingInstance::new(2, vec![1, 1], vec![(vec![2], vec![])]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
        let err = CachingInstance::new(2, vec![1, 1], vec![(vec![], vec![0])]).unwrap_err();
        assert!(matches!(err, Error::EmptyDesired { destination: 1 }));
    }

    #[test]
    fn zero_streams_rejected() {
        let err = CachingInstance::new(2, vec![1, 0], vec![(vec![0], vec![])]).unwrap_err();
        assert!(matches!(err, Error::BadStreamCount { message: 2 }));
    }

    #[test]
    fn five_message_omega_matches_hand_listing() {
        let problem = CompletionProblem::from_instance(&five_message_example());
        assert_eq!(problem.nrows(), 5);
        assert_eq!(problem.ncols(), 5);
        // 1-based listing: (1,1),(1,3),(1,4),(2,2),(2,3),(2,4),(3,1),(3,3),
        // (3,5),(4,1),(4,4),(4,5),(5,2),(5,5).
        let expected: Vec<(usize, usize)> = [
            (1, 1),
            (1, 3),
            (1, 4),
            (2, 2),
            (2, 3),
            (2, 4),
            (3, 1),
            (3, 3),
            (3, 5),
            (4, 1),
            (4, 4),
            (4, 5),
            (5, 2),
            (5, 5),
        ]
        .iter()
        .map(|&(i, j)| (i - 1, j - 1))
        .collect();
        assert_eq!(problem.omega(), expected.as_slice());
        // J is the identity pattern on the (i,i) entries.
        for (idx, &(i, j)) in problem.omega().iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert_eq!(problem.target()[idx], want);
        }
    }

    #[test]
    fn no_cache_unicast_observes_everything() {
        let inst =
            CachingInstance::new(2, vec![1, 1], vec![(vec![0], vec![]), (vec![1], vec![])])
                .unwrap();
        let problem = CompletionProblem::from_instance(&inst);
        assert_eq!(problem.omega().len(), 4);
        assert_eq!(problem.dense_target(), DMatrix::identity(2, 2));
    }

    #[test]
    fn groupcast_blocks_match_hand_application() {
        // Destination 1 wants messages 1 and 2 with nothing cached;
        // destination 2 wants message 2 and caches message 1.
        let inst = CachingInstance::new(
            2,
            vec![1, 1],
            vec![(vec![0, 1], vec![]), (vec![1], vec![0])],
        )
        .unwrap();
        let problem = CompletionProblem::from_instance(&inst);
        assert_eq!((problem.nrows(), problem.ncols()), (3, 2));
        assert_eq!(
            problem.omega(),
            &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 1)]
        );
        let dense = problem.dense_target();
        let expected = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(dense, expected);
    }

    #[test]
    fn omega_size_matches_block_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let k = rng.random_range(2..8usize);
            let m = rng.random_range(0..k);
            let q0 = rng.random_range(1..4usize);
            let inst = CachingInstance::random_unicast(k, m, q0, rng.random()).unwrap();
            let problem = CompletionProblem::from_instance(&inst);
            let q_total: usize = inst.streams().iter().sum();
            let mut expected = 0;
            for dest in inst.destinations() {
                let observed_cols: usize = (0..k)
                    .filter(|&j| !dest.caches(j))
                    .map(|j| inst.streams()[j])
                    .sum();
                for &i in dest.desired() {
                    expected += inst.streams()[i] * observed_cols;
                }
            }
            assert_eq!(problem.omega().len(), expected);
            assert_eq!(problem.ncols(), q_total);
            // Unicast with uniform streams: every scalar row observes (K-m)*Q0.
            let per_row = (k - m) * q0;
            let mut counts = vec![0usize; problem.nrows()];
            for &(i, _) in problem.omega() {
                counts[i] += 1;
            }
            assert!(counts.iter().all(|&c| c == per_row));
            // J has exactly one 1 per desired stream.
            let ones = problem.target().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, problem.nrows());
        }
    }

    #[test]
    fn completion_problem_is_deterministic() {
        let inst = five_message_example();
        let a = CompletionProblem::from_instance(&inst);
        let b = CompletionProblem::from_instance(&inst);
        assert_eq!(a, b);
    }

    #[test]
    fn random_unicast_cache_sizes() {
        let inst = CachingInstance::random_unicast(20, 0, 3, 11).unwrap();
        assert!(inst.destinations().iter().all(|d| d.cached().is_empty()));
        let inst = CachingInstance::random_unicast(20, 19, 3, 11).unwrap();
        for (k, d) in inst.destinations().iter().enumerate() {
            let want: Vec<usize> = (0..20).filter(|&j| j != k).collect();
            assert_eq!(d.cached(), want.as_slice());
            assert_eq!(d.desired(), &[k]);
        }
        assert!(CachingInstance::random_unicast(20, 20, 3, 11).is_err());
    }

    #[test]
    fn random_unicast_is_deterministic() {
        let a = CachingInstance::random_unicast(20, 10, 3, 42).unwrap();
        let b = CachingInstance::random_unicast(20, 10, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = CachingInstance::random_unicast(20, 10, 3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn text_round_trip() {
        let inst = five_message_example();
        let text = inst.to_text();
        let parsed = CachingInstance::from_text(&text).unwrap();
        assert_eq!(parsed, inst);
        // Canonical form is a fixed point of write(read(.)).
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn parse_rejects_empty_and_garbage() {
        assert!(matches!(
            CachingInstance::from_text(""),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            CachingInstance::from_text("k = \"five\""),
            Err(Error::Parse(_))
        ));
        // 0 is out of range in the 1-based file format.
        let text = "k = 2\nstreams = [1, 1]\n\n[[destinations]]\ndesired = [0]\ncached = []\n";
        assert!(matches!(
            CachingInstance::from_text(text),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn non_canonical_input_normalizes() {
        let text = "k = 3\nstreams = [1, 1, 1]\n\n[[destinations]]\ndesired = [2]\ncached = [3, 1, 3]\n";
        let inst = CachingInstance::from_text(text).unwrap();
        assert_eq!(inst.destinations()[0].cached(), &[0, 2]);
        let canon = inst.to_text();
        assert!(canon.contains("cached = [1, 3]"));
    }
}
