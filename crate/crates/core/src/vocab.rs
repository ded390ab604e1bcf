//! Shared token vocabulary for the synthetic task suite.
//!
//! Layout (23 ids): PAD, MASK, SEP (answer delimiter), '+', '=', digits 0–9,
//! letters a–h. All task families and the denoiser share this table.

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const SEP: usize = 2;
pub const PLUS: usize = 3;
pub const EQ: usize = 4;
pub const DIGIT_BASE: usize = 5; // ids 5..=14 are digits 0..=9
pub const LETTER_BASE: usize = 15; // ids 15..=22 are letters a..=h
pub const N_LETTERS: usize = 8;
pub const SIZE: usize = LETTER_BASE + N_LETTERS;

pub fn digit_token(d: usize) -> usize {
    debug_assert!(d < 10);
    DIGIT_BASE + d
}

pub fn token_digit(t: usize) -> Option<usize> {
    (DIGIT_BASE..DIGIT_BASE + 10).contains(&t).then(|| t - DIGIT_BASE)
}

pub fn letter_token(l: usize) -> usize {
    debug_assert!(l < N_LETTERS);
    LETTER_BASE + l
}

pub fn is_letter(t: usize) -> bool {
    (LETTER_BASE..LETTER_BASE + N_LETTERS).contains(&t)
}

/// Encode a nonnegative integer as digit tokens, no leading zeros.
pub fn encode_number(n: u64) -> Vec<usize> {
    n.to_string().bytes().map(|b| digit_token((b - b'0') as usize)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        assert_eq!(token_digit(digit_token(7)), Some(7));
        assert_eq!(token_digit(PAD), None);
        assert_eq!(encode_number(46), vec![digit_token(4), digit_token(6)]);
        assert_eq!(encode_number(0), vec![digit_token(0)]);
        assert!(SIZE <= 32);
    }
}
