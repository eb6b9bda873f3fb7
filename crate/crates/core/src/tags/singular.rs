const IRREGULAR: &[(&str, &str)] = &[
    ("children", "child"),
    ("cookies", "cookie"),
    ("feet", "foot"),
    ("gases", "gas"),
    ("geese", "goose"),
    ("halves", "half"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("lives", "life"),
    ("loaves", "loaf"),
    ("men", "man"),
    ("mice", "mouse"),
    ("movies", "movie"),
    ("people", "person"),
    ("pies", "pie"),
    ("shelves", "shelf"),
    ("teeth", "tooth"),
    ("ties", "tie"),
    ("wives", "wife"),
    ("wolves", "wolf"),
    ("women", "woman"),
];

const UNCHANGED: &[&str] = &[
    "acoustics", "alias", "atlas", "bias", "canvas", "chaos", "christmas", "electronics", "gas", "headphones",
    "lens", "mathematics", "news", "physics", "series", "species", "trousers", "scissors",
];

fn irregular(word: &str) -> Option<&'static str> {
    IRREGULAR.iter().find(|(p, _)| *p == word).map(|&(_, s)| s)
}

/// Rule-based plural stripping. Every output is a fixed point.
pub fn singularize(word: &str) -> String {
    if let Some(s) = irregular(word) {
        return s.to_owned();
    }
    let stripped = strip_suffix(word);
    // "mens" → "men" must land on "man" in one pass.
    irregular(&stripped).map(str::to_owned).unwrap_or(stripped)
}

/// "bus", "virus", "chorus" but not "hous" or "caus".
fn latin_us(stem: &str) -> bool {
    let b = stem.as_bytes();
    b.len() >= 3 && stem.ends_with("us") && !b"aeiou".contains(&b[b.len() - 3])
}

fn strip_suffix(word: &str) -> String {
    if UNCHANGED.contains(&word) || word.chars().count() <= 3 || !word.is_ascii() {
        return word.to_owned();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    if word.ends_with("xes") || word.ends_with("ches") || word.ends_with("shes") {
        return word[..word.len() - 2].to_owned();
    }
    if let Some(stem) = word.strip_suffix("es").filter(|_| word.ends_with("ses")) {
        if stem.ends_with("ss") || latin_us(stem) {
            return stem.to_owned();
        }
        return word[..word.len() - 1].to_owned();
    }
    if word.ends_with('s') && !(word.ends_with("ss") || word.ends_with("us") || word.ends_with("is")) {
        return word[..word.len() - 1].to_owned();
    }
    word.to_owned()
}
