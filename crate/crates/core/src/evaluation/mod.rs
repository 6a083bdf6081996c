//! BLEU, validation loss, KL estimates and peakedness.

mod bleu;
mod measures;

pub use bleu::{corpus_bleu, corpus_bleu_tokens, sentence_bleu, tokenize, BleuReport, MAX_ORDER};
pub use measures::{
    enumerate_outcomes, exact_expected_nll, exact_j_sent, measure_j_sent, measure_j_word, outcome_log_prob, peakedness,
    teacher_outputs, validation_loss, word_kl, KlApprox, KlEstimate, Outcome, Peakedness,
};
