//! Byte-level tokenizer with four specials.
//!
//! A transcript is `BOS prompt-bytes SEP response-bytes EOS`.

pub type Token = usize;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const SEP: Token = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode_bytes(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// `BOS text SEP`: the context a response is generated after.
pub fn encode_prompt(text: &str) -> Vec<Token> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.bytes().map(Token::from));
    out.push(SEP);
    out
}

/// Response bytes followed by `EOS`.
pub fn encode_response(text: &str) -> Vec<Token> {
    let mut out = encode_bytes(text);
    out.push(EOS);
    out
}

/// Number of tokens `encode_prompt` produces.
pub fn prompt_token_len(text: &str) -> usize {
    text.len() + 2
}

/// Bytes up to the first EOS, specials dropped, whitespace trimmed.
pub fn decode_response(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).trim().to_string()
}
