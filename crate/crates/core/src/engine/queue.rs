use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// An entry in the event queue, totally ordered by `(time, sequence)`.
#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub time: f64,
    pub sequence: u64,
    pub payload: P,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    next_sequence: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_sequence: 0,
        }
    }
}

impl<P> EventQueue<P> {
    pub fn push(&mut self, time: f64, payload: P) -> u64 {
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(SimEvent {
            time,
            sequence,
            payload,
        });
        sequence
    }

    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_pop_in_insertion_order() {
        let mut q = EventQueue::default();
        q.push(1.0, "b");
        q.push(0.5, "a");
        q.push(1.0, "c");
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| e.payload).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    proptest! {
        #[test]
        fn pops_in_total_order(times in proptest::collection::vec(0u32..50, 0..100)) {
            let mut q = EventQueue::default();
            for (i, t) in times.iter().enumerate() {
                q.push(*t as f64, i);
            }
            let mut last: Option<(f64, u64)> = None;
            while let Some(e) = q.pop() {
                if let Some((t, s)) = last {
                    prop_assert!(t < e.time || (t == e.time && s < e.sequence));
                }
                last = Some((e.time, e.sequence));
            }
        }
    }
}
