//! Toolchain for the Clown machine: assembler (`cas`), linker (`clink`),
//! disassembler, the exe object-file container, and the preprocessor.

pub mod assemble;
pub mod disasm;
pub mod exe;
pub mod link;
pub mod object;
pub mod preprocess;
