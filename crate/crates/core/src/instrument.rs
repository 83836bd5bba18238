//! Per-thread invocation counters for the training-only branches.
//!
//! Evaluation must never reach the text encoder or the part projection
//! heads; these counters make that observable.

use std::cell::Cell;

thread_local! {
    static TEXT_ENCODER_CALLS: Cell<u64> = const { Cell::new(0) };
    static PART_BRANCH_CALLS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub text_encoder_calls: u64,
    pub part_branch_calls: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        text_encoder_calls: TEXT_ENCODER_CALLS.with(Cell::get),
        part_branch_calls: PART_BRANCH_CALLS.with(Cell::get),
    }
}

pub fn reset() {
    TEXT_ENCODER_CALLS.with(|c| c.set(0));
    PART_BRANCH_CALLS.with(|c| c.set(0));
}

pub(crate) fn count_text_encoder() {
    TEXT_ENCODER_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_part_branch() {
    PART_BRANCH_CALLS.with(|c| c.set(c.get() + 1));
}
