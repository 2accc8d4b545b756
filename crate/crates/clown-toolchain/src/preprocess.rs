//! The assembler's preprocessor pass: `#include`, object-like `#define`,
//! `#undef`, `#ifdef`/`#ifndef`/`#else`/`#endif`, plus `//` and `/* */`
//! comment stripping.
//!
//! Output is plain text with `#line N "file"` markers so later passes can
//! report diagnostics against original source locations. Semicolon
//! comments are left alone — they belong to the assembly syntax proper.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("{file}:{line}: cannot open include file \"{name}\"")]
    MissingInclude { file: String, line: usize, name: String },
    #[error("{file}:{line}: unterminated conditional (missing #endif)")]
    UnterminatedConditional { file: String, line: usize },
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{file}:{line}: unterminated block comment")]
    UnterminatedComment { file: String, line: usize },
    #[error("include depth limit exceeded at \"{0}\"")]
    IncludeDepth(String),
}

/// Supplies the text of an `#include`d file by name.
pub type IncludeResolver<'a> = dyn Fn(&str) -> Option<String> + 'a;

pub fn preprocess(
    text: &str,
    file: &str,
    resolve: &IncludeResolver,
) -> Result<String, PreprocessError> {
    let mut out = String::new();
    let mut defines = HashMap::new();
    expand_file(text, file, resolve, &mut defines, &mut out, 0)?;
    Ok(out)
}

fn expand_file(
    text: &str,
    file: &str,
    resolve: &IncludeResolver,
    defines: &mut HashMap<String, String>,
    out: &mut String,
    depth: usize,
) -> Result<(), PreprocessError> {
    if depth > 32 {
        return Err(PreprocessError::IncludeDepth(file.to_string()));
    }
    let stripped = strip_comments(text, file)?;
    // condition stack: each frame is (currently_active, any_branch_taken)
    let mut conds: Vec<(bool, bool)> = Vec::new();
    out.push_str(&format!("#line 1 \"{file}\"\n"));
    for (idx, raw) in stripped.lines().enumerate() {
        let line_no = idx + 1;
        let active = conds.iter().all(|&(a, _)| a);
        let trimmed = raw.trim_start();
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim_start();
            let (word, args) = split_word(rest);
            match word {
                "include" if active => {
                    let name = parse_include_name(args).ok_or_else(|| {
                        PreprocessError::Malformed {
                            file: file.into(),
                            line: line_no,
                            msg: "expected #include \"file\"".into(),
                        }
                    })?;
                    let body = resolve(&name).ok_or_else(|| PreprocessError::MissingInclude {
                        file: file.into(),
                        line: line_no,
                        name: name.clone(),
                    })?;
                    expand_file(&body, &name, resolve, defines, out, depth + 1)?;
                    out.push_str(&format!("#line {} \"{file}\"\n", line_no + 1));
                }
                "define" if active => {
                    let (name, value) = split_word(args.trim());
                    if name.is_empty() || !is_ident(name) {
                        return Err(PreprocessError::Malformed {
                            file: file.into(),
                            line: line_no,
                            msg: "expected #define NAME [value]".into(),
                        });
                    }
                    defines.insert(name.to_string(), value.trim().to_string());
                }
                "undef" if active => {
                    defines.remove(args.trim());
                }
                "ifdef" | "ifndef" => {
                    let defined = defines.contains_key(args.trim());
                    let taken = active && (defined == (word == "ifdef"));
                    conds.push((taken, taken));
                }
                "else" => {
                    let (_, taken) = conds.pop().ok_or_else(|| PreprocessError::Malformed {
                        file: file.into(),
                        line: line_no,
                        msg: "#else without #ifdef".into(),
                    })?;
                    let outer = conds.iter().all(|&(a, _)| a);
                    conds.push((outer && !taken, true));
                }
                "endif" => {
                    conds.pop().ok_or_else(|| PreprocessError::Malformed {
                        file: file.into(),
                        line: line_no,
                        msg: "#endif without #ifdef".into(),
                    })?;
                }
                _ if !active => {}
                other => {
                    return Err(PreprocessError::Malformed {
                        file: file.into(),
                        line: line_no,
                        msg: format!("unknown preprocessor directive #{other}"),
                    })
                }
            }
            // keep line numbers aligned for skipped directive lines
            out.push_str(&format!("#line {} \"{file}\"\n", line_no + 1));
            continue;
        }
        if active {
            out.push_str(&substitute(raw, defines));
        }
        out.push('\n');
    }
    if !conds.is_empty() {
        return Err(PreprocessError::UnterminatedConditional {
            file: file.into(),
            line: stripped.lines().count(),
        });
    }
    Ok(())
}

fn split_word(s: &str) -> (&str, &str) {
    match s.find(|c: char| c.is_whitespace()) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    }
}

fn parse_include_name(args: &str) -> Option<String> {
    let args = args.trim();
    let inner = args.strip_prefix('"')?.strip_suffix('"')?;
    Some(inner.to_string())
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Replace defined identifiers, repeatedly, outside quotes.
fn substitute(line: &str, defines: &HashMap<String, String>) -> String {
    let mut current = line.to_string();
    for _ in 0..16 {
        let next = substitute_once(&current, defines);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn substitute_once(line: &str, defines: &HashMap<String, String>) -> String {
    let mut out = String::with_capacity(line.len());
    let bytes: Vec<char> = line.chars().collect();
    let mut i = 0;
    let mut quote: Option<char> = None;
    while i < bytes.len() {
        let c = bytes[i];
        if let Some(q) = quote {
            out.push(c);
            if c == '\\' && i + 1 < bytes.len() {
                out.push(bytes[i + 1]);
                i += 2;
                continue;
            }
            if c == q {
                quote = None;
            }
            i += 1;
        } else if c == '"' || c == '\'' {
            quote = Some(c);
            out.push(c);
            i += 1;
        } else if c == ';' {
            // assembly comment: copy verbatim
            out.extend(&bytes[i..]);
            break;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                i += 1;
            }
            let word: String = bytes[start..i].iter().collect();
            match defines.get(&word) {
                Some(v) => out.push_str(v),
                None => out.push_str(&word),
            }
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

/// Remove `//` and `/* */` comments (quote-aware); newlines inside block
/// comments are preserved so line numbers survive.
fn strip_comments(text: &str, file: &str) -> Result<String, PreprocessError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut line = 1;
    let mut quote: Option<char> = None;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
        }
        if let Some(q) = quote {
            out.push(c);
            if c == '\\' && i + 1 < chars.len() {
                out.push(chars[i + 1]);
                i += 2;
                continue;
            }
            if c == q {
                quote = None;
            }
            i += 1;
            continue;
        }
        match c {
            '"' | '\'' => {
                quote = Some(c);
                out.push(c);
                i += 1;
            }
            ';' => {
                // assembly comment runs to end of line; keep it for cas
                while i < chars.len() && chars[i] != '\n' {
                    out.push(chars[i]);
                    i += 1;
                }
            }
            '/' if chars.get(i + 1) == Some(&'/') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '/' if chars.get(i + 1) == Some(&'*') => {
                let start_line = line;
                i += 2;
                loop {
                    match (chars.get(i), chars.get(i + 1)) {
                        (Some('*'), Some('/')) => {
                            i += 2;
                            break;
                        }
                        (Some('\n'), _) => {
                            out.push('\n');
                            line += 1;
                            i += 1;
                        }
                        (Some(_), _) => i += 1,
                        (None, _) => {
                            return Err(PreprocessError::UnterminatedComment {
                                file: file.into(),
                                line: start_line,
                            })
                        }
                    }
                }
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    Ok(out)
}
