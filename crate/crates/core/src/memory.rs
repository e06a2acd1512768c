//! Space-time memory: the per-object store of embedded past frames and the
//! dense read that attends from every query location to every space-time
//! location in memory.
//!
//! For query location `i` and memory location `j` the read weight is
//! `softmax_j(kQ_i · kM_j)`, evaluated with max subtraction (no key
//! scaling). The output concatenates the query value with the weighted sum
//! of memory values, in that order.

use serde::{Deserialize, Serialize};

use crate::encoders::{stack_memory, KeyValuePair};
use crate::error::{Result, StmError};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Permanent,
    Previous,
}

/// Which frames are written to memory during inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    /// Only the annotated first frame.
    First,
    /// Only the most recent frame.
    Previous,
    /// First frame plus the most recent frame (an infinite interval).
    FirstAndPrevious,
    /// First, previous, and every frame whose index is a multiple of `n`.
    Interval(usize),
}

impl MemoryPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            MemoryPolicy::Interval(0) => Err(StmError::invalid("memory interval must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MemoryPolicy::First => "first".into(),
            MemoryPolicy::Previous => "prev".into(),
            MemoryPolicy::FirstAndPrevious => "first+prev".into(),
            MemoryPolicy::Interval(n) => format!("every-{n}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryEntry<E = f32> {
    pub pair: KeyValuePair<E>,
    pub kind: SlotKind,
    pub frame: usize,
}

/// Embedded memory frames of one object, kept in chronological order.
#[derive(Clone, Debug)]
pub struct MemoryStore<E = f32> {
    entries: Vec<MemoryEntry<E>>,
    policy: MemoryPolicy,
    capacity: Option<usize>,
}

impl<E: Element> MemoryStore<E> {
    /// An empty store. `capacity`, when set, bounds the number of entries
    /// and must leave room for the first and the previous frame.
    pub fn new(policy: MemoryPolicy, capacity: Option<usize>) -> Result<Self> {
        policy.validate()?;
        if let Some(c) = capacity {
            if c < 2 {
                return Err(StmError::invalid("memory capacity must be at least 2"));
            }
        }
        Ok(MemoryStore {
            entries: Vec::new(),
            policy,
            capacity,
        })
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn entries(&self) -> &[MemoryEntry<E>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn permanent_frames(&self) -> Vec<usize> {
        self.frames_of(SlotKind::Permanent)
    }

    pub fn previous_frame(&self) -> Option<usize> {
        self.frames_of(SlotKind::Previous).first().copied()
    }

    fn frames_of(&self, kind: SlotKind) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.frame)
            .collect()
    }

    fn check_consistent(&self, pair: &KeyValuePair<E>) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.pair.key.shape() != pair.key.shape() || first.pair.value.shape() != pair.value.shape() {
                return Err(StmError::dim(format!(
                    "memory entry shapes {:?}/{:?} differ from stored {:?}/{:?}",
                    pair.key.shape(),
                    pair.value.shape(),
                    first.pair.key.shape(),
                    first.pair.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Writes the annotated first frame.
    pub fn init(&mut self, pair: KeyValuePair<E>, frame: usize) -> Result<()> {
        if !self.entries.is_empty() {
            return Err(StmError::invalid("memory store is already initialized"));
        }
        // With the previous-only policy the first frame is simply the most
        // recent one until frame 1 replaces it.
        let kind = match self.policy {
            MemoryPolicy::Previous => SlotKind::Previous,
            _ => SlotKind::Permanent,
        };
        self.entries.push(MemoryEntry { pair, kind, frame });
        Ok(())
    }

    /// Writes the embedding of a newly segmented frame.
    ///
    /// The new frame always takes the single previous slot. The frame it
    /// displaces is kept as a permanent interval entry when its index is a
    /// multiple of the interval, otherwise dropped.
    pub fn update(&mut self, pair: KeyValuePair<E>, frame: usize) -> Result<()> {
        let last = self
            .entries
            .iter()
            .map(|e| e.frame)
            .max()
            .ok_or_else(|| StmError::invalid("memory store must be initialized before update"))?;
        if frame <= last {
            return Err(StmError::invalid(format!(
                "frame {frame} is not newer than stored frame {last}"
            )));
        }
        self.check_consistent(&pair)?;
        let interval = match self.policy {
            MemoryPolicy::First => return Ok(()),
            MemoryPolicy::Previous | MemoryPolicy::FirstAndPrevious => None,
            MemoryPolicy::Interval(n) => Some(n),
        };
        if let Some(pos) = self.entries.iter().position(|e| e.kind == SlotKind::Previous) {
            let displaced = self.entries.remove(pos);
            if interval.is_some_and(|n| displaced.frame % n == 0) {
                self.entries.push(MemoryEntry {
                    kind: SlotKind::Permanent,
                    ..displaced
                });
            }
        }
        self.entries.push(MemoryEntry {
            pair,
            kind: SlotKind::Previous,
            frame,
        });
        self.evict();
        Ok(())
    }

    /// Drops the oldest interval entry (neither the first frame nor the
    /// previous slot) while the store exceeds its capacity.
    fn evict(&mut self) {
        let Some(cap) = self.capacity else { return };
        let first_frame = self.entries.first().map(|e| e.frame);
        while self.entries.len() > cap {
            let victim = self
                .entries
                .iter()
                .position(|e| e.kind == SlotKind::Permanent && Some(e.frame) != first_frame);
            match victim {
                Some(i) => {
                    self.entries.remove(i);
                }
                None => break,
            }
        }
    }

    /// Keys `T×Ck×h×w` and values `T×Cv×h×w` in chronological order.
    pub fn stacked(&self) -> Result<(Tensor<E>, Tensor<E>)> {
        let pairs: Vec<KeyValuePair<E>> = self.entries.iter().map(|e| e.pair.clone()).collect();
        stack_memory(&pairs)
    }
}

/// Result of a memory read.
#[derive(Clone, Debug)]
pub struct ReadOutput<E = f32> {
    /// `[query value; retrieved value]`, `2·Cv × h × w`.
    pub y: Tensor<E>,
    /// Read weights indexed `[t, my, mx, qy, qx]`.
    pub weights: Option<Tensor<E>>,
}

/// Raw matching score `kq · km` accumulated in `f64`.
pub fn match_score<E: Element>(kq: &[E], km: &[E]) -> Result<f64> {
    if kq.len() != km.len() {
        return Err(StmError::dim(format!(
            "key lengths differ: {} vs {}",
            kq.len(),
            km.len()
        )));
    }
    Ok(kq.iter().zip(km).map(|(&a, &b)| b.as_f64() * a.as_f64()).sum())
}

/// Unnormalized similarity `exp(kq · km)`. Reads never evaluate this
/// directly; they normalize raw scores with max subtraction.
pub fn similarity<E: Element>(kq: &[E], km: &[E]) -> Result<f64> {
    Ok(match_score(kq, km)?.exp())
}

struct ReadShapes {
    ck: usize,
    cv: usize,
    t: usize,
    mh: usize,
    mw: usize,
    qh: usize,
    qw: usize,
}

fn read_shapes<E: Element>(kq: &Tensor<E>, vq: &Tensor<E>, km: &Tensor<E>, vm: &Tensor<E>) -> Result<ReadShapes> {
    kq.expect_rank(3, "query key")?;
    vq.expect_rank(3, "query value")?;
    if km.rank() != 4 || vm.rank() != 4 {
        return Err(StmError::dim(format!(
            "memory maps must be T×C×h×w, got {:?} and {:?}",
            km.shape(),
            vm.shape()
        )));
    }
    let s = ReadShapes {
        ck: kq.shape()[0],
        cv: vq.shape()[0],
        t: km.shape()[0],
        mh: km.shape()[2],
        mw: km.shape()[3],
        qh: kq.shape()[1],
        qw: kq.shape()[2],
    };
    if km.shape()[1] != s.ck {
        return Err(StmError::dim(format!(
            "key channels differ: query {} vs memory {}",
            s.ck,
            km.shape()[1]
        )));
    }
    if vm.shape() != [s.t, s.cv, s.mh, s.mw] {
        return Err(StmError::dim(format!(
            "memory value {:?} inconsistent with key {:?} and query value channels {}",
            vm.shape(),
            km.shape(),
            s.cv
        )));
    }
    if vq.shape()[1..] != kq.shape()[1..] {
        return Err(StmError::dim(format!(
            "query key {:?} and value {:?} extents differ",
            kq.shape(),
            vq.shape()
        )));
    }
    Ok(s)
}

/// Reference read: an explicit loop over query locations, memory
/// locations and channels.
pub fn space_time_read<E: Element>(
    kq: &Tensor<E>,
    vq: &Tensor<E>,
    km: &Tensor<E>,
    vm: &Tensor<E>,
) -> Result<ReadOutput<E>> {
    let s = read_shapes(kq, vq, km, vm)?;
    let (q_len, m_len) = (s.qh * s.qw, s.mh * s.mw);
    let total = s.t * m_len;
    let mut retrieved = vec![E::zero(); s.cv * q_len];
    let mut weights = vec![E::zero(); total * q_len];
    let mut scores = vec![E::zero(); total];
    let mut exps = vec![0.0f64; total];
    let (kqd, kmd, vmd) = (kq.data(), km.data(), vm.data());
    for i in 0..q_len {
        for t in 0..s.t {
            for j in 0..m_len {
                let mut dot = 0.0f64;
                for c in 0..s.ck {
                    dot += kmd[(t * s.ck + c) * m_len + j].as_f64() * kqd[c * q_len + i].as_f64();
                }
                scores[t * m_len + j] = E::of(dot);
            }
        }
        let max = scores
            .iter()
            .copied()
            .fold(E::neg_infinity(), |a, b| if b > a { b } else { a })
            .as_f64();
        let mut z = 0.0f64;
        for (e, s) in exps.iter_mut().zip(&scores) {
            *e = (s.as_f64() - max).exp();
            z += *e;
        }
        for (jj, e) in exps.iter().enumerate() {
            weights[jj * q_len + i] = E::of(e / z);
        }
        for c in 0..s.cv {
            let mut acc = 0.0f64;
            for t in 0..s.t {
                for j in 0..m_len {
                    let w = weights[(t * m_len + j) * q_len + i];
                    acc += vmd[(t * s.cv + c) * m_len + j].as_f64() * w.as_f64();
                }
            }
            retrieved[c * q_len + i] = E::of(acc);
        }
    }
    let retrieved = Tensor::new(&[s.cv, s.qh, s.qw], retrieved)?;
    let y = Tensor::concat(&[vq, &retrieved], 0)?;
    let weights = Tensor::new(&[s.t, s.mh, s.mw, s.qh, s.qw], weights)?;
    Ok(ReadOutput {
        y,
        weights: Some(weights),
    })
}

/// Tape form of the read built from two matrix products and one softmax.
/// Returns `y` and the `THW × HW` weight matrix.
pub fn read_vars<E: Element>(tape: &mut Tape<E>, kq: Var, vq: Var, km: Var, vm: Var) -> Result<(Var, Var)> {
    let s = read_shapes(tape.value(kq), tape.value(vq), tape.value(km), tape.value(vm))?;
    let (q_len, m_len) = (s.qh * s.qw, s.mh * s.mw);
    let kq_mat = tape.reshape(kq, &[s.ck, q_len])?;
    let km_t = tape.permute(km, &[0, 2, 3, 1])?;
    let km_mat = tape.reshape(km_t, &[s.t * m_len, s.ck])?;
    let scores = tape.matmul(km_mat, kq_mat)?;
    let weights = tape.softmax(scores, 0)?;
    let vm_t = tape.permute(vm, &[1, 0, 2, 3])?;
    let vm_mat = tape.reshape(vm_t, &[s.cv, s.t * m_len])?;
    let retrieved = tape.matmul(vm_mat, weights)?;
    let retrieved = tape.reshape(retrieved, &[s.cv, s.qh, s.qw])?;
    let y = tape.concat(&[vq, retrieved], 0)?;
    Ok((y, weights))
}

/// Matrix-product read. With `deterministic` set the products use a fixed
/// reduction order and agree bit-for-bit with [`space_time_read`].
pub fn read_fast<E: Element>(
    kq: &Tensor<E>,
    vq: &Tensor<E>,
    km: &Tensor<E>,
    vm: &Tensor<E>,
    deterministic: bool,
) -> Result<ReadOutput<E>> {
    let mut tape = Tape::inference().with_deterministic(deterministic);
    let vars = [kq, vq, km, vm].map(|t| tape.constant(t.clone()));
    let (y, w) = read_vars(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    let (t, mh, mw) = (km.shape()[0], km.shape()[2], km.shape()[3]);
    let (qh, qw) = (kq.shape()[1], kq.shape()[2]);
    Ok(ReadOutput {
        y: tape.value(y).clone(),
        weights: Some(tape.value(w).reshape(&[t, mh, mw, qh, qw])?),
    })
}

/// Read weights of one query location over all memory locations, `T×h×w`.
pub fn export_attention<E: Element>(kq: &Tensor<E>, km: &Tensor<E>, pixel: (usize, usize)) -> Result<Tensor<E>> {
    kq.expect_rank(3, "query key")?;
    km.expect_rank(4, "memory key")?;
    let (ck, qh, qw) = (kq.shape()[0], kq.shape()[1], kq.shape()[2]);
    let (t, mh, mw) = (km.shape()[0], km.shape()[2], km.shape()[3]);
    if km.shape()[1] != ck {
        return Err(StmError::dim("key channels differ between query and memory"));
    }
    let (py, px) = pixel;
    if py >= qh || px >= qw {
        return Err(StmError::invalid(format!(
            "query pixel ({py}, {px}) outside {qh}x{qw}"
        )));
    }
    let query: Vec<E> = (0..ck).map(|c| kq.get(&[c, py, px])).collect();
    let m_len = mh * mw;
    let mut scores = Vec::with_capacity(t * m_len);
    let mut column = vec![E::zero(); ck];
    for ti in 0..t {
        for j in 0..m_len {
            for (c, slot) in column.iter_mut().enumerate() {
                *slot = km.data()[(ti * ck + c) * m_len + j];
            }
            scores.push(E::of(match_score(&query, &column)?));
        }
    }
    Tensor::new(&[t, mh, mw], scores)?.reshape(&[t * m_len])?.softmax(0)?.reshape(&[t, mh, mw])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(v: f32) -> KeyValuePair {
        KeyValuePair::new(
            Tensor::full(&[2, 1, 1], v).unwrap(),
            Tensor::full(&[3, 1, 1], v).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn first_and_previous_keeps_two_entries() {
        let mut store = MemoryStore::new(MemoryPolicy::FirstAndPrevious, None).unwrap();
        store.init(pair(0.0), 0).unwrap();
        store.update(pair(1.0), 1).unwrap();
        assert_eq!(store.permanent_frames(), vec![0]);
        assert_eq!(store.previous_frame(), Some(1));
        for f in 2..30 {
            store.update(pair(f as f32), f).unwrap();
            assert_eq!(store.len(), 2);
        }
        assert_eq!(store.previous_frame(), Some(29));
    }

    #[test]
    fn interval_promotes_displaced_multiples() {
        let mut store = MemoryStore::new(MemoryPolicy::Interval(5), None).unwrap();
        store.init(pair(0.0), 0).unwrap();
        for f in 1..=10 {
            store.update(pair(f as f32), f).unwrap();
        }
        assert_eq!(store.permanent_frames(), vec![0, 5]);
        assert_eq!(store.previous_frame(), Some(10));
        store.update(pair(11.0), 11).unwrap();
        assert_eq!(store.permanent_frames(), vec![0, 5, 10]);
        assert_eq!(store.previous_frame(), Some(11));
        let frames: Vec<usize> = store.entries().iter().map(|e| e.frame).collect();
        assert_eq!(frames, vec![0, 5, 10, 11]);
    }

    #[test]
    fn first_and_previous_only_policies() {
        let mut first = MemoryStore::new(MemoryPolicy::First, None).unwrap();
        let mut prev = MemoryStore::new(MemoryPolicy::Previous, None).unwrap();
        first.init(pair(0.0), 0).unwrap();
        prev.init(pair(0.0), 0).unwrap();
        for f in 1..8 {
            first.update(pair(f as f32), f).unwrap();
            prev.update(pair(f as f32), f).unwrap();
        }
        assert_eq!(first.permanent_frames(), vec![0]);
        assert_eq!(first.len(), 1);
        assert_eq!(prev.previous_frame(), Some(7));
        assert_eq!(prev.len(), 1);
    }

    #[test]
    fn capacity_evicts_oldest_interval_entry() {
        let mut store = MemoryStore::new(MemoryPolicy::Interval(1), Some(3)).unwrap();
        store.init(pair(0.0), 0).unwrap();
        for f in 1..=6 {
            store.update(pair(f as f32), f).unwrap();
            assert!(store.len() <= 3);
        }
        assert_eq!(store.permanent_frames(), vec![0, 5]);
        assert_eq!(store.previous_frame(), Some(6));
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut store = MemoryStore::<f32>::new(MemoryPolicy::Interval(5), None).unwrap();
        assert!(store.update(pair(1.0), 1).is_err());
        store.init(pair(0.0), 0).unwrap();
        assert!(store.init(pair(0.0), 0).is_err());
        assert!(store.update(pair(1.0), 0).is_err());
        let odd = KeyValuePair::new(Tensor::zeros(&[2, 2, 2]).unwrap(), Tensor::zeros(&[3, 2, 2]).unwrap()).unwrap();
        assert!(matches!(store.update(odd, 1), Err(StmError::Dimension(_))));
        assert!(MemoryStore::<f32>::new(MemoryPolicy::Interval(0), None).is_err());
        assert!(MemoryStore::<f32>::new(MemoryPolicy::Interval(2), Some(1)).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity::<f32>(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((similarity::<f32>(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert!(similarity::<f32>(&[1.0], &[1.0, 0.0]).is_err());
    }
}
