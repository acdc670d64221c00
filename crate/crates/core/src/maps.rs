//! Map sources: builtin fixtures and user-supplied files.
//!
//! A map reference is either `builtin:<name>` or a filesystem path to a
//! file in the same text format (`W H` header, then `#`/`.` rows).

use crate::{Error, Result};

pub const BUILTIN_ARENA: &str = include_str!("../maps/arena.txt");
pub const BUILTIN_CORRIDOR: &str = include_str!("../maps/corridor.txt");
pub const BUILTIN_MAZE: &str = include_str!("../maps/maze.txt");

pub fn builtin_names() -> &'static [&'static str] {
    &["arena", "corridor", "maze"]
}

/// Resolves a map reference to its text content.
pub fn resolve(reference: &str) -> Result<String> {
    if let Some(name) = reference.strip_prefix("builtin:") {
        match name {
            "arena" => Ok(BUILTIN_ARENA.to_string()),
            "corridor" => Ok(BUILTIN_CORRIDOR.to_string()),
            "maze" => Ok(BUILTIN_MAZE.to_string()),
            other => Err(Error::Config(format!(
                "unknown builtin map `{other}` (have: {})",
                builtin_names().join(", ")
            ))),
        }
    } else {
        Ok(std::fs::read_to_string(reference)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve() {
        for name in builtin_names() {
            let text = resolve(&format!("builtin:{name}")).unwrap();
            assert!(text.starts_with(char::is_numeric));
        }
    }

    #[test]
    fn unknown_builtin_rejected() {
        assert!(resolve("builtin:void").is_err());
    }

    #[test]
    fn path_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        std::fs::write(&p, "3 3\n###\n#.#\n###\n").unwrap();
        assert_eq!(resolve(p.to_str().unwrap()).unwrap(), "3 3\n###\n#.#\n###\n");
    }
}
