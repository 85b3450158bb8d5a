//! Synthetic tasks with exact answers, 4×4 Sudoku, and byte-level corpora.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Target value excluded from the loss.
pub const IGNORE: usize = usize::MAX;

/// Vocabulary of byte-level corpora: 256 byte values plus one separator.
pub const BYTE_VOCAB: usize = 257;

/// A batch of `[batch, len]` token grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBatch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TaskBatch {
    /// Targets with unmasked positions replaced by [`IGNORE`].
    pub fn loss_targets(&self) -> Vec<usize> {
        self.targets
            .iter()
            .zip(&self.mask)
            .map(|(&t, &m)| if m { t } else { IGNORE })
            .collect()
    }

    /// Rows `[start, start + n)`.
    pub fn rows(&self, start: usize, n: usize) -> TaskBatch {
        let r = start * self.len..(start + n) * self.len;
        TaskBatch {
            batch: n,
            len: self.len,
            inputs: self.inputs[r.clone()].to_vec(),
            targets: self.targets[r.clone()].to_vec(),
            mask: self.mask[r].to_vec(),
        }
    }

    pub fn concat(parts: &[TaskBatch]) -> TaskBatch {
        let len = parts[0].len;
        let mut out = TaskBatch {
            batch: 0,
            len,
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for p in parts {
            assert_eq!(p.len, len, "concatenated batches must share a length");
            out.batch += p.batch;
            out.inputs.extend_from_slice(&p.inputs);
            out.targets.extend_from_slice(&p.targets);
            out.mask.extend_from_slice(&p.mask);
        }
        out
    }
}

/// Copy task: `len/2` random symbols, a delimiter (id `vocab`), then the same
/// symbols again, shifted for next-token prediction. Only the copied half is
/// scored. Token ids lie in `0..=vocab`.
pub fn gen_copy(batch: usize, len: usize, vocab: usize, seed: u64) -> Result<TaskBatch> {
    if len < 2 || !len.is_multiple_of(2) || vocab == 0 {
        return Err(Error::contract(format!("copy task needs even len >= 2 and vocab >= 1, got {len}, {vocab}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = len / 2;
    let mut out = TaskBatch {
        batch,
        len,
        inputs: Vec::with_capacity(batch * len),
        targets: Vec::with_capacity(batch * len),
        mask: Vec::with_capacity(batch * len),
    };
    for _ in 0..batch {
        let prefix: Vec<usize> = (0..half).map(|_| rng.random_range(0..vocab)).collect();
        let mut seq = prefix.clone();
        seq.push(vocab);
        seq.extend_from_slice(&prefix);
        out.inputs.extend_from_slice(&seq[..len]);
        out.targets.extend_from_slice(&seq[1..]);
        out.mask.extend((0..len).map(|i| i >= half));
    }
    Ok(out)
}

/// Modular addition `a b = c` with `c = (a + b) mod m`. Inputs are
/// `[a, b, =]`, targets `[b, =, c]`, and only `c` is scored. `=` is id `m`.
pub fn gen_modadd(batch: usize, modulus: usize, seed: u64) -> Result<TaskBatch> {
    if modulus < 2 {
        return Err(Error::contract("modulus must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TaskBatch {
        batch,
        len: 3,
        inputs: Vec::with_capacity(batch * 3),
        targets: Vec::with_capacity(batch * 3),
        mask: Vec::with_capacity(batch * 3),
    };
    for _ in 0..batch {
        let a = rng.random_range(0..modulus);
        let b = rng.random_range(0..modulus);
        out.inputs.extend_from_slice(&[a, b, modulus]);
        out.targets.extend_from_slice(&[b, modulus, (a + b) % modulus]);
        out.mask.extend_from_slice(&[false, false, true]);
    }
    Ok(out)
}

/// A 4×4 puzzle, row-major, digits 1–4 with 0 for blanks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SudokuInstance {
    pub givens: [u8; 16],
    pub solution: [u8; 16],
}

fn peers(i: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / 4, i % 4);
    let (br, bc) = (r / 2 * 2, c / 2 * 2);
    (0..4)
        .map(move |k| r * 4 + k)
        .chain((0..4).map(move |k| k * 4 + c))
        .chain((0..4).map(move |k| (br + k / 2) * 4 + bc + k % 2))
        .filter(move |&j| j != i)
}

fn allowed(grid: &[u8; 16], i: usize, d: u8) -> bool {
    peers(i).all(|j| grid[j] != d)
}

/// Exhaustive count of completions of `grid`, stopping at `limit`.
pub fn count_solutions(grid: &[u8; 16], limit: usize) -> usize {
    fn rec(g: &mut [u8; 16], limit: usize, found: &mut usize) {
        let Some(i) = g.iter().position(|&v| v == 0) else {
            *found += 1;
            return;
        };
        for d in 1..=4 {
            if *found >= limit {
                return;
            }
            if allowed(g, i, d) {
                g[i] = d;
                rec(g, limit, found);
                g[i] = 0;
            }
        }
    }
    if (0..16).any(|i| grid[i] != 0 && !allowed(grid, i, grid[i])) {
        return 0;
    }
    let mut g = *grid;
    let mut found = 0;
    rec(&mut g, limit, &mut found);
    found
}

/// The unique completion of `grid`, if there is exactly one.
pub fn solve_unique(grid: &[u8; 16]) -> Option<[u8; 16]> {
    fn rec(g: &mut [u8; 16], sols: &mut Vec<[u8; 16]>) {
        let Some(i) = g.iter().position(|&v| v == 0) else {
            sols.push(*g);
            return;
        };
        for d in 1..=4 {
            if sols.len() > 1 {
                return;
            }
            if allowed(g, i, d) {
                g[i] = d;
                rec(g, sols);
                g[i] = 0;
            }
        }
    }
    let mut sols = Vec::new();
    if count_solutions(grid, 1) == 0 {
        return None;
    }
    rec(&mut grid.clone(), &mut sols);
    (sols.len() == 1).then(|| sols[0])
}

/// Every row, column and 2×2 box holds 1–4 exactly once.
pub fn is_valid_solution(grid: &[u8; 16]) -> bool {
    grid.iter().all(|&d| (1..=4).contains(&d)) && (0..16).all(|i| allowed(grid, i, grid[i]))
}

fn random_solution(rng: &mut impl Rng) -> [u8; 16] {
    fn fill(g: &mut [u8; 16], i: usize, rng: &mut impl Rng) -> bool {
        if i == 16 {
            return true;
        }
        let mut digits = [1u8, 2, 3, 4];
        digits.shuffle(rng);
        for d in digits {
            if allowed(g, i, d) {
                g[i] = d;
                if fill(g, i + 1, rng) {
                    return true;
                }
                g[i] = 0;
            }
        }
        false
    }
    let mut g = [0u8; 16];
    assert!(fill(&mut g, 0, rng), "4x4 grids always complete");
    g
}

/// `count` distinct uniquely-solvable puzzles with a number of givens drawn
/// uniformly from `givens_lo..=givens_hi`.
pub fn gen_sudoku4(count: usize, givens_lo: usize, givens_hi: usize, seed: u64) -> Result<Vec<SudokuInstance>> {
    if givens_lo < 4 || givens_hi > 16 || givens_lo > givens_hi {
        return Err(Error::contract(format!(
            "givens range {givens_lo}..={givens_hi} must lie within 4..=16"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 10) {
            return Err(Error::contract(format!(
                "could only generate {} distinct puzzles with {givens_lo}..={givens_hi} givens",
                out.len()
            )));
        }
        let solution = random_solution(&mut rng);
        let target = rng.random_range(givens_lo..=givens_hi);
        let mut givens = solution;
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut rng);
        let mut left = 16;
        for i in order {
            if left == target {
                break;
            }
            let keep = givens[i];
            givens[i] = 0;
            if count_solutions(&givens, 2) == 1 {
                left -= 1;
            } else {
                givens[i] = keep;
            }
        }
        if left > givens_hi || !seen.insert(givens) {
            continue;
        }
        out.push(SudokuInstance { givens, solution });
    }
    Ok(out)
}

impl SudokuInstance {
    pub fn blanks(&self) -> usize {
        self.givens.iter().filter(|&&v| v == 0).count()
    }

    /// `givens<TAB>solution`, digits row-major.
    pub fn to_line(&self) -> String {
        let digits = |g: &[u8; 16]| g.iter().map(|d| char::from(b'0' + d)).collect::<String>();
        format!("{}\t{}", digits(&self.givens), digits(&self.solution))
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::contract(format!("malformed puzzle line `{line}`"));
        let (g, s) = line.trim_end().split_once('\t').ok_or_else(bad)?;
        let parse = |s: &str| -> Result<[u8; 16]> {
            let v: Vec<u8> = s
                .bytes()
                .map(|b| if (b'0'..=b'4').contains(&b) { Ok(b - b'0') } else { Err(bad()) })
                .collect::<Result<_>>()?;
            v.try_into().map_err(|_| bad())
        };
        Ok(SudokuInstance {
            givens: parse(g)?,
            solution: parse(s)?,
        })
    }
}

pub fn save_sudoku(path: &Path, puzzles: &[SudokuInstance]) -> Result<()> {
    let mut text = String::new();
    for p in puzzles {
        text.push_str(&p.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_sudoku(path: &Path) -> Result<Vec<SudokuInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(SudokuInstance::parse_line).collect()
}

/// Givens as inputs (0 = blank), the solution as targets, blanks scored.
pub fn sudoku_batch(puzzles: &[SudokuInstance]) -> TaskBatch {
    let mut b = TaskBatch {
        batch: puzzles.len(),
        len: 16,
        inputs: Vec::with_capacity(puzzles.len() * 16),
        targets: Vec::with_capacity(puzzles.len() * 16),
        mask: Vec::with_capacity(puzzles.len() * 16),
    };
    for p in puzzles {
        b.inputs.extend(p.givens.iter().map(|&d| d as usize));
        b.targets.extend(p.solution.iter().map(|&d| d as usize));
        b.mask.extend(p.givens.iter().map(|&d| d == 0));
    }
    b
}

/// Byte-level token stream of a text file.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub seq_len: usize,
}

pub fn load_corpus(path: &Path, seq_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if std::str::from_utf8(&bytes).is_err() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, "not UTF-8 text")));
    }
    Corpus::from_bytes(&bytes, seq_len)
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::contract("seq_len must be positive"));
        }
        Ok(Corpus {
            tokens: bytes.iter().map(|&b| b as usize).collect(),
            seq_len,
        })
    }

    /// Number of complete non-overlapping windows.
    pub fn windows(&self) -> usize {
        self.tokens.len().saturating_sub(1) / self.seq_len
    }

    /// Window `i` as a single-row batch.
    pub fn window(&self, i: usize) -> TaskBatch {
        let l = self.seq_len;
        let s = i * l;
        TaskBatch {
            batch: 1,
            len: l,
            inputs: self.tokens[s..s + l].to_vec(),
            targets: self.tokens[s + 1..s + l + 1].to_vec(),
            mask: vec![true; l],
        }
    }

    /// Batch `step` of a seeded shuffle of the windows (reshuffled per epoch).
    pub fn batch(&self, step: usize, batch: usize, seed: u64) -> Result<TaskBatch> {
        let n = self.windows();
        if n == 0 {
            return Err(Error::contract("corpus shorter than one window"));
        }
        let mut rows = Vec::with_capacity(batch);
        let mut order: Vec<usize> = Vec::new();
        let mut epoch = usize::MAX;
        for j in 0..batch {
            let flat = step * batch + j;
            if flat / n != epoch {
                epoch = flat / n;
                order = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            }
            rows.push(self.window(order[flat % n]));
        }
        Ok(TaskBatch::concat(&rows))
    }
}

pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_small_enumeration() {
        let b = gen_copy(64, 4, 2, 3).unwrap();
        for r in 0..b.batch {
            let row = b.rows(r, 1);
            let (p0, p1) = (row.inputs[0], row.inputs[1]);
            assert_eq!(row.inputs, vec![p0, p1, 2, p0]);
            assert_eq!(row.targets, vec![p1, 2, p0, p1]);
            assert_eq!(row.mask, vec![false, false, true, true]);
        }
        let seen: std::collections::HashSet<_> = (0..b.batch).map(|r| (b.inputs[r * 4], b.inputs[r * 4 + 1])).collect();
        assert_eq!(seen.len(), 4);
        assert_eq!(b, gen_copy(64, 4, 2, 3).unwrap());
        assert!(gen_copy(1, 3, 2, 0).is_err());
    }

    #[test]
    fn modadd_examples() {
        let b = gen_modadd(500, 7, 1).unwrap();
        for r in 0..b.batch {
            let (a, x) = (b.inputs[r * 3], b.inputs[r * 3 + 1]);
            assert_eq!(b.targets[r * 3 + 2], (a + x) % 7);
            assert_eq!(b.inputs[r * 3 + 2], 7);
        }
        assert_eq!((3 + 4) % 5, 2);
    }

    #[test]
    fn known_grid_is_valid() {
        let g = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];
        assert!(is_valid_solution(&g));
        let mut bad = g;
        bad.swap(0, 1);
        assert!(!is_valid_solution(&bad));
        assert_eq!(count_solutions(&g, 2), 1);
        assert_eq!(count_solutions(&[0; 16], 1000), 288);
    }

    #[test]
    fn generated_puzzles_are_unique_and_consistent() {
        let ps = gen_sudoku4(50, 4, 10, 9).unwrap();
        let distinct: std::collections::HashSet<_> = ps.iter().map(|p| p.givens).collect();
        assert_eq!(distinct.len(), 50);
        for p in &ps {
            assert!(is_valid_solution(&p.solution));
            assert_eq!(solve_unique(&p.givens), Some(p.solution));
            let givens = 16 - p.blanks();
            assert!((4..=10).contains(&givens));
            assert!(p.givens.iter().zip(&p.solution).all(|(&g, &s)| g == 0 || g == s));
        }
    }

    #[test]
    fn full_grid_has_no_holes() {
        let ps = gen_sudoku4(3, 16, 16, 0).unwrap();
        for p in ps {
            assert_eq!(p.givens, p.solution);
            let b = sudoku_batch(&[p]);
            assert_eq!(b.inputs, b.targets);
            assert!(b.mask.iter().all(|m| !m));
        }
    }

    #[test]
    fn puzzle_lines_round_trip() {
        let ps = gen_sudoku4(5, 5, 8, 2).unwrap();
        for p in &ps {
            assert_eq!(&SudokuInstance::parse_line(&p.to_line()).unwrap(), p);
        }
        assert!(SudokuInstance::parse_line("123").is_err());
    }

    #[test]
    fn corpus_windows() {
        let c = Corpus::from_bytes(b"abc", 2).unwrap();
        assert_eq!(c.windows(), 1);
        let w = c.window(0);
        assert_eq!(w.inputs, vec![b'a' as usize, b'b' as usize]);
        assert_eq!(w.targets, vec![b'b' as usize, b'c' as usize]);
        assert_eq!(c.tokens.len(), 3);
        assert_eq!(detokenize(&c.tokens), b"abc");
        let err = load_corpus(Path::new("/nonexistent/file.txt"), 4).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
