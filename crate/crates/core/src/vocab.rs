//! Reserved token ids shared by every task and model.

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
/// "Insert nothing in this slot."
pub const END_OF_SLOT: Token = 3;
pub const FIRST_CONTENT: Token = 4;
pub const NUM_RESERVED: usize = FIRST_CONTENT as usize;

pub fn is_reserved(t: Token) -> bool {
    t < FIRST_CONTENT
}
