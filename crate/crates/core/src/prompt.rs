//! Token estimation and revision-prompt assembly under an input budget.

use thiserror::Error;

use crate::bank::Paragraph;

pub const INSTRUCTION_HEADER: &str = "### INSTRUCTION";
pub const QUERY_HEADER: &str = "### QUERY";
pub const DRAFT_HEADER: &str = "### DRAFT ANSWER";
pub const EVIDENCE_HEADER: &str = "### EVIDENCE";

pub const DEFAULT_REVISION_INSTRUCTION: &str = "Revise the draft answer given the query and the \
evidence candidates. Assess each evidence candidate, keep what it supports, correct what it \
contradicts, and cite the titles of the law clauses you rely on.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("token budget {budget} is below the {required} tokens needed for instruction, query and draft")]
    BudgetTooSmall { budget: usize, required: usize },
}

/// CJK ideographs, kana, Hangul syllables, CJK punctuation and fullwidth
/// forms each count as one token.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F     // CJK symbols and punctuation
        | 0x3040..=0x30FF   // hiragana, katakana
        | 0x3400..=0x4DBF   // extension A
        | 0x4E00..=0x9FFF   // unified ideographs
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // compatibility ideographs
        | 0xFF00..=0xFFEF   // halfwidth and fullwidth forms
        | 0x20000..=0x2FA1F // extensions B onward, compatibility supplement
        | 0x30000..=0x323AF // extensions G, H
    )
}

/// CJK scalars count one each; every other scalar counts a quarter,
/// rounded up over the whole text.
pub fn estimate_tokens(text: &str) -> usize {
    let (cjk, other) = text.chars().fold((0usize, 0usize), |(c, o), ch| {
        if is_cjk(ch) {
            (c + 1, o)
        } else {
            (c, o + 1)
        }
    });
    cjk + other.div_ceil(4)
}

fn render(instruction: &str, query: &str, draft: &str, evidence: &[&Paragraph]) -> String {
    let mut out = String::new();
    for (header, body) in [
        (INSTRUCTION_HEADER, instruction),
        (QUERY_HEADER, query),
        (DRAFT_HEADER, draft),
    ] {
        out.push_str(header);
        out.push('\n');
        out.push_str(body);
        out.push_str("\n\n");
    }
    out.push_str(EVIDENCE_HEADER);
    out.push('\n');
    for (i, p) in evidence.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[{}] {}\n{}\n", i + 1, p.title, p.body));
    }
    out
}

/// An assembled prompt and how many evidence entries survived the budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub text: String,
    pub evidence_included: usize,
}

/// Lays out instruction, query, draft and rank-ordered evidence. Evidence is
/// dropped from the lowest-ranked end until the estimate fits `budget`;
/// the first three sections are never shortened.
pub fn assemble_revision_prompt(
    instruction: &str,
    query: &str,
    draft: &str,
    evidence: &[Paragraph],
    budget: usize,
) -> Result<AssembledPrompt, PromptError> {
    let refs: Vec<&Paragraph> = evidence.iter().collect();
    let core = render(instruction, query, draft, &[]);
    let required = estimate_tokens(&core);
    if required > budget {
        return Err(PromptError::BudgetTooSmall { budget, required });
    }
    // Token cost is monotone in the number of kept entries, so binary search
    // for the largest prefix that fits.
    let fits = |n: usize| estimate_tokens(&render(instruction, query, draft, &refs[..n])) <= budget;
    let (mut lo, mut hi) = (0usize, refs.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(AssembledPrompt {
        text: render(instruction, query, draft, &refs[..lo]),
        evidence_included: lo,
    })
}
