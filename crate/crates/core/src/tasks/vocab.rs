//! Fixed token table (version 1, 48 ids).
//!
//! | ids     | tokens                                         |
//! |---------|------------------------------------------------|
//! | 0–3     | `PAD` `BOS` `EOS` `SEP`                        |
//! | 4–13    | digits `0`–`9`                                 |
//! | 14–23   | letters `a`–`j`                                |
//! | 24–29   | `INSTR_COPY` `INSTR_REV` `INSTR_SORT` `INSTR_INC` `INSTR_CAESAR` `INSTR_GENERIC` |
//! | 30–34   | `CUE_1`–`CUE_5`                                |
//! | 35–47   | `FILL_0`–`FILL_12` (prompt filler)             |

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const VOCAB_VERSION: u32 = 1;
pub const VOCAB_SIZE: usize = 48;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const DIGIT_0: TokenId = 4;
pub const LETTER_A: TokenId = 14;
pub const INSTR_COPY: TokenId = 24;
pub const INSTR_REV: TokenId = 25;
pub const INSTR_SORT: TokenId = 26;
pub const INSTR_INC: TokenId = 27;
pub const INSTR_CAESAR: TokenId = 28;
pub const INSTR_GENERIC: TokenId = 29;
pub const CUE_1: TokenId = 30;
pub const FILL_0: TokenId = 35;
pub const N_CUES: usize = 5;
pub const N_FILLERS: usize = 13;

/// Tokens that may never appear inside a generated prompt or answer.
pub const STRUCTURAL: [TokenId; 3] = [PAD, BOS, SEP];

pub fn digit(d: usize) -> TokenId {
    assert!(d < 10);
    DIGIT_0 + d
}

pub fn letter(l: usize) -> TokenId {
    assert!(l < 10);
    LETTER_A + l
}

pub fn cue(i: usize) -> TokenId {
    assert!(i < N_CUES);
    CUE_1 + i
}

pub fn is_digit(t: TokenId) -> bool {
    (DIGIT_0..DIGIT_0 + 10).contains(&t)
}

pub fn is_letter(t: TokenId) -> bool {
    (LETTER_A..LETTER_A + 10).contains(&t)
}

pub fn is_symbol(t: TokenId) -> bool {
    is_digit(t) || is_letter(t)
}

pub fn is_instruction(t: TokenId) -> bool {
    (INSTR_COPY..=INSTR_GENERIC).contains(&t)
}

pub fn is_cue(t: TokenId) -> bool {
    (CUE_1..CUE_1 + N_CUES).contains(&t)
}

pub fn name(t: TokenId) -> Result<String> {
    let s = match t {
        PAD => "PAD".to_string(),
        BOS => "BOS".to_string(),
        EOS => "EOS".to_string(),
        SEP => "SEP".to_string(),
        _ if is_digit(t) => ((b'0' + (t - DIGIT_0) as u8) as char).to_string(),
        _ if is_letter(t) => ((b'a' + (t - LETTER_A) as u8) as char).to_string(),
        INSTR_COPY => "INSTR_COPY".to_string(),
        INSTR_REV => "INSTR_REV".to_string(),
        INSTR_SORT => "INSTR_SORT".to_string(),
        INSTR_INC => "INSTR_INC".to_string(),
        INSTR_CAESAR => "INSTR_CAESAR".to_string(),
        INSTR_GENERIC => "INSTR_GENERIC".to_string(),
        _ if is_cue(t) => format!("CUE_{}", t - CUE_1 + 1),
        _ if (FILL_0..VOCAB_SIZE).contains(&t) => format!("FILL_{}", t - FILL_0),
        _ => {
            return Err(Error::Index {
                index: t,
                limit: VOCAB_SIZE,
                context: "token id".into(),
            })
        }
    };
    Ok(s)
}

pub fn id(name: &str) -> Result<TokenId> {
    let unknown = || Error::format("token", format!("unknown token name {name:?}"));
    let id = match name {
        "PAD" => PAD,
        "BOS" => BOS,
        "EOS" => EOS,
        "SEP" => SEP,
        "INSTR_COPY" => INSTR_COPY,
        "INSTR_REV" => INSTR_REV,
        "INSTR_SORT" => INSTR_SORT,
        "INSTR_INC" => INSTR_INC,
        "INSTR_CAESAR" => INSTR_CAESAR,
        "INSTR_GENERIC" => INSTR_GENERIC,
        _ => {
            if let Some(n) = name.strip_prefix("CUE_") {
                let i: usize = n.parse().map_err(|_| unknown())?;
                if !(1..=N_CUES).contains(&i) {
                    return Err(unknown());
                }
                return Ok(CUE_1 + i - 1);
            }
            if let Some(n) = name.strip_prefix("FILL_") {
                let i: usize = n.parse().map_err(|_| unknown())?;
                if i >= N_FILLERS {
                    return Err(unknown());
                }
                return Ok(FILL_0 + i);
            }
            let b = name.as_bytes();
            match b {
                [c @ b'0'..=b'9'] => DIGIT_0 + (c - b'0') as usize,
                [c @ b'a'..=b'j'] => LETTER_A + (c - b'a') as usize,
                _ => return Err(unknown()),
            }
        }
    };
    Ok(id)
}

pub fn encode(text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace().map(id).collect()
}

pub fn decode(ids: &[TokenId]) -> Result<String> {
    Ok(ids.iter().map(|&t| name(t)).collect::<Result<Vec<_>>>()?.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_full_vocab() {
        let all: Vec<TokenId> = (0..VOCAB_SIZE).collect();
        let text = decode(&all).unwrap();
        assert_eq!(encode(&text).unwrap(), all);
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<String> = (0..VOCAB_SIZE).map(|t| name(t).unwrap()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), VOCAB_SIZE);
    }

    #[test]
    fn rejects_unknown() {
        assert!(id("k").is_err());
        assert!(id("CUE_6").is_err());
        assert!(id("FILL_13").is_err());
        assert!(name(VOCAB_SIZE).is_err());
    }
}
