//! Token layouts for the task prompts and the chat format.
//!
//! ```text
//! task          <USR> <RECON|COMP> <ASSISTANT> context <EOT>
//! chat turn     <USR> question <ASSISTANT> answer <EOT>
//! in-context    <CTX> context <EOT> followed by chat turns
//! ```

use crate::corpus::shifted_targets;
use crate::tokenizer::{self, ASSISTANT, CTX, EOT, USR};

/// Tokens and next-token targets of a task turn; only `target` and its EOT are supervised.
pub fn task_turn(task_token: u32, target: &[u32]) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut tokens = vec![USR, task_token, ASSISTANT];
    tokens.extend(target);
    tokens.push(EOT);
    let mut supervised = vec![false; 3];
    supervised.extend(std::iter::repeat_n(true, target.len() + 1));
    let targets = shifted_targets(&tokens, &supervised);
    (tokens, targets)
}

/// `<CTX> context <EOT>`.
pub fn context_block(context: &[u32]) -> Vec<u32> {
    let mut out = vec![CTX];
    out.extend(context);
    out.push(EOT);
    out
}

/// Prompt for the next answer given earlier `(question, answer)` turns.
pub fn chat_prompt(history: &[(String, String)], question: &str) -> Vec<u32> {
    let mut out = Vec::new();
    for (q, a) in history {
        out.push(USR);
        out.extend(tokenizer::encode(q));
        out.push(ASSISTANT);
        out.extend(tokenizer::encode(a));
        out.push(EOT);
    }
    out.push(USR);
    out.extend(tokenizer::encode(question));
    out.push(ASSISTANT);
    out
}

/// A full conversation after `prefix`, supervised on answer tokens and their EOT.
pub fn chat_conversation(prefix: &[u32], turns: &[(String, String)]) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut tokens = prefix.to_vec();
    let mut supervised = vec![false; prefix.len()];
    for (q, a) in turns {
        let q = tokenizer::encode(q);
        let a = tokenizer::encode(a);
        tokens.push(USR);
        tokens.extend(&q);
        tokens.push(ASSISTANT);
        supervised.extend(std::iter::repeat_n(false, q.len() + 2));
        tokens.extend(&a);
        tokens.push(EOT);
        supervised.extend(std::iter::repeat_n(true, a.len() + 1));
    }
    let targets = shifted_targets(&tokens, &supervised);
    (tokens, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_turn_layout() {
        let (t, y) = task_turn(tokenizer::RECON, &[65, 66]);
        assert_eq!(t, vec![USR, tokenizer::RECON, ASSISTANT, 65, 66, EOT]);
        assert_eq!(y, vec![None, None, Some(65), Some(66), Some(EOT as usize), None]);
    }

    #[test]
    fn chat_supervises_answers_only() {
        let turns = vec![("q".to_string(), "ab".to_string())];
        let (t, y) = chat_conversation(&[], &turns);
        assert_eq!(t, vec![USR, 113, ASSISTANT, 97, 98, EOT]);
        assert_eq!(y, vec![None, None, Some(97), Some(98), Some(EOT as usize), None]);
        assert_eq!(chat_prompt(&[], "q"), vec![USR, 113, ASSISTANT]);
    }
}
