//! Order statistics and the alpha-update operations.
//!
//! Two interchangeable routes pick the K best-ranked items of a confidence
//! array: a QuickSelect threshold scan and a bounded heap. Both rank items by
//! confidence and break ties by more recent capture, then by lower index, so
//! they always agree on the selected set.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use chrono::{Datelike, NaiveDate};
use rand::Rng;

use crate::corpus::{months_between, ClassTag, HistoryGroup, WeightedCorpus};
use crate::error::{Error, Result};

/// k-th smallest element (1-based) via randomized QuickSelect.
pub fn quickselect_kth<R: Rng + ?Sized>(values: &[f64], k: usize, rng: &mut R) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(Error::range(format!(
            "rank {k} outside [1, {}]",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    let target = k - 1;
    let (mut lo, mut hi) = (0usize, v.len());
    loop {
        if hi - lo == 1 {
            return Ok(v[lo]);
        }
        let pivot = v[rng.gen_range(lo..hi)];
        // three-way partition: [lo, lt) < pivot, [lt, gt) == pivot, [gt, hi) > pivot
        let (mut lt, mut i, mut gt) = (lo, lo, hi);
        while i < gt {
            match v[i].total_cmp(&pivot) {
                Ordering::Less => {
                    v.swap(lt, i);
                    lt += 1;
                    i += 1;
                }
                Ordering::Greater => {
                    gt -= 1;
                    v.swap(i, gt);
                }
                Ordering::Equal => i += 1,
            }
        }
        if target < lt {
            hi = lt;
        } else if target >= gt {
            lo = gt;
        } else {
            return Ok(pivot);
        }
    }
}

/// Rank of an item: greater is better.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RankKey {
    /// Confidence, negated for bottom-K so that "better" is always "greater".
    score: f64,
    recency: i32,
    index: usize,
}

impl Eq for RankKey {}

impl Ord for RankKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.recency.cmp(&other.recency))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn rank_key(conf: &[f64], recency: Option<&[i32]>, top: bool, i: usize) -> RankKey {
    RankKey {
        score: if top { conf[i] } else { -conf[i] },
        recency: recency.map_or(0, |r| r[i]),
        index: i,
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::range(format!("cannot select {k} of {n} items")));
    }
    Ok(())
}

/// Indices (ascending) of the K largest (`top`) or smallest confidences,
/// tracked with a bounded heap. Ties go to the lower index.
pub fn top_k_heap(conf: &[f64], k: usize, top: bool) -> Result<Vec<usize>> {
    top_k_heap_with_recency(conf, None, k, top)
}

/// As [`top_k_heap`], with ties broken first by larger `recency`.
pub fn top_k_heap_with_recency(
    conf: &[f64],
    recency: Option<&[i32]>,
    k: usize,
    top: bool,
) -> Result<Vec<usize>> {
    check_k(k, conf.len())?;
    let mut stream = TopKStream::new(k, top);
    for i in 0..conf.len() {
        stream.push_key(rank_key(conf, recency, top, i));
    }
    stream.finish()
}

/// Bounded-heap top-K over a stream of confidences whose positions are
/// their arrival order. Memory stays O(K) however long the stream.
#[derive(Debug, Clone)]
pub struct TopKStream {
    k: usize,
    top: bool,
    seen: usize,
    heap: BinaryHeap<Reverse<RankKey>>,
}

impl TopKStream {
    pub fn new(k: usize, top: bool) -> Self {
        Self {
            k,
            top,
            seen: 0,
            heap: BinaryHeap::with_capacity(k.saturating_add(1).min(1 << 20)),
        }
    }

    pub fn push(&mut self, conf: f64) {
        let key = RankKey {
            score: if self.top { conf } else { -conf },
            recency: 0,
            index: self.seen,
        };
        self.push_key(key);
    }

    fn push_key(&mut self, key: RankKey) {
        self.seen += 1;
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Reverse(key));
        } else if key > self.heap.peek().expect("heap is full").0 {
            self.heap.pop();
            self.heap.push(Reverse(key));
        }
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    /// Ascending stream positions of the selected items.
    pub fn finish(self) -> Result<Vec<usize>> {
        check_k(self.k, self.seen)?;
        let mut out: Vec<usize> = self.heap.into_iter().map(|Reverse(k)| k.index).collect();
        out.sort_unstable();
        Ok(out)
    }
}

/// Threshold route: find the K-th order statistic with QuickSelect, take
/// every item strictly beyond it, then fill the remaining slots from the
/// items equal to it in tie order.
pub fn select_by_threshold<R: Rng + ?Sized>(
    conf: &[f64],
    recency: Option<&[i32]>,
    k: usize,
    top: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_k(k, conf.len())?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = conf.len();
    let threshold = if top {
        quickselect_kth(conf, n - k + 1, rng)?
    } else {
        quickselect_kth(conf, k, rng)?
    };
    let beyond = if top { Ordering::Greater } else { Ordering::Less };

    let mut out = Vec::with_capacity(k);
    let mut equal = Vec::new();
    for (i, c) in conf.iter().enumerate() {
        match c.total_cmp(&threshold) {
            Ordering::Equal => equal.push(i),
            o if o == beyond => out.push(i),
            _ => {}
        }
    }
    let remaining = k - out.len();
    if equal.len() > remaining {
        equal.sort_unstable_by_key(|&i| Reverse(rank_key(conf, recency, top, i)));
        equal.truncate(remaining);
    }
    out.extend(equal);
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    QuickSelect,
    Heap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateSpec {
    /// Eligibility window in months before `date_ref`.
    pub window_months: u32,
    /// Number of alpha increments targeted.
    pub k: usize,
    /// Top-K (highest task confidence) rather than bottom-K.
    pub top: bool,
    pub date_ref: NaiveDate,
}

impl UpdateSpec {
    fn eligible(&self, date: NaiveDate) -> bool {
        let m = months_between(self.date_ref, date);
        date <= self.date_ref && m >= 0 && m < i64::from(self.window_months)
    }
}

fn recency(group: &HistoryGroup) -> Vec<i32> {
    group
        .samples
        .iter()
        .map(|s| s.capture_date.num_days_from_ce())
        .collect()
}

/// Increment alpha for the K best-ranked samples of the whole group that
/// fall inside the window. Returns the number of increments, which is below
/// K when the window excludes some of the selected samples.
pub fn update<R: Rng + ?Sized>(group: &mut HistoryGroup, spec: &UpdateSpec, rng: &mut R) -> Result<usize> {
    update_with(group, spec, SelectionStrategy::QuickSelect, rng)
}

pub fn update_with<R: Rng + ?Sized>(
    group: &mut HistoryGroup,
    spec: &UpdateSpec,
    strategy: SelectionStrategy,
    rng: &mut R,
) -> Result<usize> {
    group.validate()?;
    if spec.k == 0 {
        return Ok(0);
    }
    let rec = recency(group);
    let selected = match strategy {
        SelectionStrategy::QuickSelect => {
            select_by_threshold(&group.conf, Some(&rec), spec.k, spec.top, rng)?
        }
        SelectionStrategy::Heap => top_k_heap_with_recency(&group.conf, Some(&rec), spec.k, spec.top)?,
    };
    let mut count = 0;
    for i in selected {
        if spec.eligible(group.samples[i].capture_date) {
            group.alpha[i] += 1;
            count += 1;
        }
    }
    Ok(count)
}

/// Reward the `m_t` most confident task detections in Φ_T.
pub fn update_task<R: Rng + ?Sized>(
    corpus: &mut WeightedCorpus,
    m_t: usize,
    d_t: u32,
    rng: &mut R,
) -> Result<usize> {
    group_update(corpus, ClassTag::Task, m_t, d_t, true, rng)
}

/// Reward the `m_b` least task-like captures in Φ_B.
pub fn update_background<R: Rng + ?Sized>(
    corpus: &mut WeightedCorpus,
    m_b: usize,
    d_b: u32,
    rng: &mut R,
) -> Result<usize> {
    group_update(corpus, ClassTag::Background, m_b, d_b, false, rng)
}

/// Reward the `m_c` most task-like captures in Φ_B (confounders).
pub fn update_confounders<R: Rng + ?Sized>(
    corpus: &mut WeightedCorpus,
    m_c: usize,
    d_b: u32,
    rng: &mut R,
) -> Result<usize> {
    group_update(corpus, ClassTag::Background, m_c, d_b, true, rng)
}

fn group_update<R: Rng + ?Sized>(
    corpus: &mut WeightedCorpus,
    tag: ClassTag,
    k: usize,
    window_months: u32,
    top: bool,
    rng: &mut R,
) -> Result<usize> {
    let spec = UpdateSpec {
        window_months,
        k,
        top,
        date_ref: corpus.date_ref,
    };
    update(corpus.group_mut(tag), &spec, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::sample;
    use crate::corpus::sum_alpha;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn group(conf: &[f64], dates: &[(i32, u32, u32)]) -> HistoryGroup {
        let mut g = HistoryGroup::new(ClassTag::Task);
        for (i, (&c, &d)) in conf.iter().zip(dates).enumerate() {
            g.push(sample(&i.to_string(), "l", d, vec![0.0]), 1, c);
        }
        g
    }

    fn spec(k: usize, top: bool, window: u32) -> UpdateSpec {
        UpdateSpec {
            window_months: window,
            k,
            top,
            date_ref: NaiveDate::from_ymd_opt(2020, 6, 15).unwrap(),
        }
    }

    #[test]
    fn quickselect_small_cases() {
        assert_eq!(quickselect_kth(&[3.0, 1.0, 2.0], 2, &mut rng()).unwrap(), 2.0);
        assert_eq!(quickselect_kth(&[5.0, 5.0, 5.0], 2, &mut rng()).unwrap(), 5.0);
        assert_eq!(quickselect_kth(&[4.0], 1, &mut rng()).unwrap(), 4.0);
        assert!(matches!(quickselect_kth(&[], 1, &mut rng()), Err(Error::Range(_))));
        assert!(matches!(quickselect_kth(&[1.0], 0, &mut rng()), Err(Error::Range(_))));
        assert!(matches!(quickselect_kth(&[1.0], 2, &mut rng()), Err(Error::Range(_))));
    }

    #[test]
    fn quickselect_matches_sort() {
        let mut r = rng();
        for _ in 0..500 {
            let n = r.gen_range(1..1000);
            let v: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..200u32)) / 7.0).collect();
            let k = r.gen_range(1..=n);
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(quickselect_kth(&v, k, &mut r).unwrap(), sorted[k - 1]);
        }
    }

    #[test]
    fn heap_small_cases() {
        assert_eq!(top_k_heap(&[0.9, 0.1, 0.5], 2, true).unwrap(), vec![0, 2]);
        assert_eq!(top_k_heap(&[0.9, 0.1, 0.5], 2, false).unwrap(), vec![1, 2]);
        assert_eq!(top_k_heap(&[0.9, 0.1, 0.5], 3, true).unwrap(), vec![0, 1, 2]);
        assert!(top_k_heap(&[0.9], 0, true).unwrap().is_empty());
        assert!(top_k_heap(&[0.9], 2, true).is_err());
        // ties resolve to lower index
        assert_eq!(top_k_heap(&[0.5, 0.5, 0.5], 2, true).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ties_prefer_recent_captures() {
        let conf = [0.5, 0.5, 0.5, 0.9];
        let rec = [10, 30, 20, 0];
        assert_eq!(top_k_heap_with_recency(&conf, Some(&rec), 2, true).unwrap(), vec![1, 3]);
        assert_eq!(
            select_by_threshold(&conf, Some(&rec), 2, true, &mut rng()).unwrap(),
            vec![1, 3]
        );
        assert_eq!(
            select_by_threshold(&conf, Some(&rec), 2, false, &mut rng()).unwrap(),
            vec![1, 2]
        );
    }

    /// Every 0/1 increment pattern over three samples, checked against the
    /// brute-force definition: the K best by confidence, intersected with the window.
    #[test]
    fn update_three_element_exhaustive() {
        let conf = [0.9, 0.5, 0.1];
        let all_dates = [(2020, 6, 1), (2020, 5, 1), (2020, 1, 1)];
        let old = (2017, 1, 1);
        for k in 0..=3 {
            for top in [true, false] {
                for outside_mask in 0..8u32 {
                    let dates: Vec<_> = (0..3)
                        .map(|i| if outside_mask >> i & 1 == 1 { old } else { all_dates[i] })
                        .collect();
                    let mut g = group(&conf, &dates);
                    let n = update(&mut g, &spec(k, top, 12), &mut rng()).unwrap();

                    let mut order = [0usize, 1, 2];
                    if !top {
                        order.reverse();
                    }
                    let expected: Vec<u32> = (0..3)
                        .map(|i| {
                            let chosen = order[..k].contains(&i);
                            let inside = outside_mask >> i & 1 == 0;
                            1 + u32::from(chosen && inside)
                        })
                        .collect();
                    assert_eq!(g.alpha, expected, "k={k} top={top} mask={outside_mask}");
                    assert_eq!(n, expected.iter().filter(|&&a| a == 2).count());
                }
            }
        }
    }

    #[test]
    fn update_examples() {
        let dates = [(2020, 6, 1), (2020, 5, 1), (2020, 1, 1)];
        let mut g = group(&[0.9, 0.5, 0.1], &dates);
        assert_eq!(update(&mut g, &spec(0, true, 6), &mut rng()).unwrap(), 0);
        assert_eq!(g.alpha, vec![1, 1, 1]);
        assert_eq!(update(&mut g, &spec(1, true, 6), &mut rng()).unwrap(), 1);
        assert_eq!(g.alpha, vec![2, 1, 1]);

        let mut g = group(&[0.9, 0.5, 0.1], &[(2018, 6, 1), (2020, 5, 1), (2020, 1, 1)]);
        assert_eq!(update(&mut g, &spec(2, true, 12), &mut rng()).unwrap(), 1);
        assert_eq!(g.alpha, vec![1, 2, 1]);

        assert!(matches!(update(&mut g, &spec(4, true, 12), &mut rng()), Err(Error::Range(_))));
    }

    #[test]
    fn window_edges() {
        let reference = (2020, 6, 15);
        // same month, later day than the reference: excluded
        let mut g = group(&[0.9], &[(2020, 6, 20)]);
        assert_eq!(update(&mut g, &spec(1, true, 6), &mut rng()).unwrap(), 0);
        // exactly D months back: excluded; D-1: included
        let mut g = group(&[0.9, 0.8], &[(2019, 12, 31), (2020, 1, 1)]);
        assert_eq!(update(&mut g, &spec(2, true, 6), &mut rng()).unwrap(), 1);
        assert_eq!(g.alpha, vec![1, 2]);
        let mut g = group(&[0.9], &[reference]);
        assert_eq!(update(&mut g, &spec(1, true, 0), &mut rng()).unwrap(), 0);
    }

    #[test]
    fn repeated_update_doubles_effect() {
        let dates = vec![(2020, 6, 1); 5];
        let mut g = group(&[0.3, 0.9, 0.1, 0.7, 0.5], &dates);
        update(&mut g, &spec(2, true, 6), &mut rng()).unwrap();
        update(&mut g, &spec(2, true, 6), &mut rng()).unwrap();
        assert_eq!(g.alpha, vec![1, 3, 1, 3, 1]);
    }

    #[test]
    fn corpus_level_updates_target_groups() {
        let mut c = crate::corpus::test_support::small_corpus(5, 2);
        c.background.conf = (0..c.background.len()).map(|i| i as f64 / 20.0).collect();
        c.task.conf = (0..c.task.len()).map(|i| 1.0 - i as f64 / 20.0).collect();
        let window = 12 * 10;
        assert_eq!(update_task(&mut c, 0, window, &mut rng()).unwrap(), 0);
        assert_eq!(update_task(&mut c, 3, window, &mut rng()).unwrap(), 3);
        assert_eq!(&c.task.alpha[..3], &[2, 2, 2]);
        assert_eq!(update_background(&mut c, 2, window, &mut rng()).unwrap(), 2);
        assert_eq!(&c.background.alpha[..2], &[2, 2]);
        assert_eq!(update_confounders(&mut c, 4, window, &mut rng()).unwrap(), 4);
        assert_eq!(&c.background.alpha[11..], &[1, 1, 1, 1]);
        assert_eq!(sum_alpha(&c.background), 5 + 2 + 4);
    }

    proptest! {
        #[test]
        fn heap_and_threshold_agree(
            conf in prop::collection::vec(0u8..20, 1..200),
            rec in prop::collection::vec(0i32..5, 200),
            k_frac in 0.0f64..=1.0,
            top: bool,
            seed: u64,
        ) {
            let conf: Vec<f64> = conf.into_iter().map(|c| f64::from(c) / 19.0).collect();
            let rec = &rec[..conf.len()];
            let k = (k_frac * conf.len() as f64).round() as usize;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = select_by_threshold(&conf, Some(rec), k, top, &mut r).unwrap();
            let b = top_k_heap_with_recency(&conf, Some(rec), k, top).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), k);
        }

        #[test]
        fn update_never_decrements(
            conf in prop::collection::vec(0.0f64..=1.0, 1..60),
            k_frac in 0.0f64..=1.0,
            top: bool,
        ) {
            let dates: Vec<_> = (0..conf.len()).map(|i| (2015 + (i % 6) as i32, 3, 1)).collect();
            let mut g = group(&conf, &dates);
            let before = g.alpha.clone();
            let k = (k_frac * conf.len() as f64) as usize;
            let n = update(&mut g, &spec(k, top, 36), &mut rng()).unwrap();
            prop_assert!(n <= k);
            prop_assert!(g.alpha.iter().zip(&before).all(|(a, b)| a >= b));
            prop_assert_eq!(g.alpha.len(), before.len());
        }
    }
}
