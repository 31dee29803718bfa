//! Byte-level tokenizer with a small block of reserved control ids.
//!
//! Ids `0..=255` are raw bytes. Control tokens live directly above the byte
//! range, so `encode` of any string can never produce one of them.

use std::fmt::Write as _;

pub const EOT: u32 = 256;
pub const RECON: u32 = 257;
pub const COMP: u32 = 258;
pub const USR: u32 = 259;
pub const ASSISTANT: u32 = 260;
pub const CTX: u32 = 261;
pub const PAD: u32 = 262;

/// First id not used by bytes or control tokens.
pub const RESERVED_END: u32 = 263;

const RESERVED: [(u32, &str); 7] = [
    (EOT, "<EOT>"),
    (RECON, "<RECON>"),
    (COMP, "<COMP>"),
    (USR, "<USR>"),
    (ASSISTANT, "<ASSISTANT>"),
    (CTX, "<CTX>"),
    (PAD, "<PAD>"),
];

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte ids to text. Control ids are rendered as their marker names;
/// ids above the reserved block are dropped.
pub fn decode(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
            continue;
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        bytes.clear();
        if let Some((_, name)) = RESERVED.iter().find(|(r, _)| *r == id) {
            out.push_str(name);
        }
    }
    out.push_str(&String::from_utf8_lossy(&bytes));
    out
}

pub fn is_reserved(id: u32) -> bool {
    (256..RESERVED_END).contains(&id)
}

/// Plain-text manifest publishing the id layout.
pub fn manifest() -> String {
    let mut s = String::from("# byte-level tokenizer\nbytes 0 255\n");
    for (id, name) in RESERVED {
        let _ = writeln!(s, "reserved {id} {name}");
    }
    s
}
