//! Deterministic rule-based lemmatizer for verbs and nouns.

/// Part of speech a token is lemmatized as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pos {
    Verb,
    Noun,
}

// Irregular forms resolved before any suffix rule. Base verbs that end in
// "ing" map to themselves so the progressive-strip rule cannot mangle them.
const IRREGULAR_VERBS: &[(&str, &str)] = &[
    ("am", "be"), ("is", "be"), ("are", "be"), ("was", "be"), ("were", "be"),
    ("been", "be"), ("being", "be"),
    ("has", "have"), ("had", "have"),
    ("does", "do"), ("did", "do"), ("done", "do"),
    ("went", "go"), ("gone", "go"),
    ("ran", "run"),
    ("sang", "sing"), ("sung", "sing"),
    ("ate", "eat"), ("eaten", "eat"),
    ("saw", "see"), ("seen", "see"),
    ("made", "make"),
    ("took", "take"), ("taken", "take"),
    ("got", "get"), ("gotten", "get"),
    ("came", "come"),
    ("gave", "give"), ("given", "give"),
    ("said", "say"),
    ("told", "tell"),
    ("thought", "think"),
    ("bought", "buy"),
    ("brought", "bring"),
    ("taught", "teach"),
    ("caught", "catch"),
    ("fought", "fight"),
    ("held", "hold"),
    ("kept", "keep"),
    ("left", "leave"),
    ("felt", "feel"),
    ("found", "find"),
    ("heard", "hear"),
    ("stood", "stand"),
    ("sat", "sit"),
    ("met", "meet"),
    ("won", "win"),
    ("paid", "pay"),
    ("sent", "send"),
    ("spent", "spend"),
    ("built", "build"),
    ("lost", "lose"),
    ("sold", "sell"),
    ("spoke", "speak"), ("spoken", "speak"),
    ("wrote", "write"), ("written", "write"),
    ("drove", "drive"), ("driven", "drive"),
    ("rode", "ride"), ("ridden", "ride"),
    ("flew", "fly"), ("flown", "fly"),
    ("drew", "draw"), ("drawn", "draw"),
    ("threw", "throw"), ("thrown", "throw"),
    ("grew", "grow"), ("grown", "grow"),
    ("knew", "know"), ("known", "know"),
    ("wore", "wear"), ("worn", "wear"),
    ("swam", "swim"), ("swum", "swim"),
    ("fell", "fall"), ("fallen", "fall"),
    ("broke", "break"), ("broken", "break"),
    ("chose", "choose"), ("chosen", "choose"),
    ("rose", "rise"), ("risen", "rise"),
    ("woke", "wake"),
    ("began", "begin"), ("begun", "begin"),
    ("used", "use"),
    ("bring", "bring"), ("swing", "swing"), ("sting", "sting"),
    ("spring", "spring"), ("string", "string"), ("cling", "cling"),
    ("fling", "fling"), ("wring", "wring"),
];

const IRREGULAR_NOUNS: &[(&str, &str)] = &[
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("people", "person"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("geese", "goose"),
    ("mice", "mouse"),
    ("knives", "knife"),
    ("wives", "wife"),
    ("lives", "life"),
    ("shoes", "shoe"),
    ("toes", "toe"),
];

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn is_consonant(c: u8) -> bool {
    c.is_ascii_alphabetic() && !is_vowel(c)
}

// Stems like "fixe"/"goe" whose trailing "es" marks third person / plural.
fn strips_whole_es(stem: &str) -> bool {
    stem.ends_with('x')
        || stem.ends_with('z')
        || stem.ends_with('o')
        || stem.ends_with("ch")
        || stem.ends_with("sh")
        || stem.ends_with("ss")
}

// After stripping -ing/-ed: undo consonant doubling (running -> run) except
// for legitimate doubles, then restore a dropped final "e" on short
// consonant-vowel-consonant stems (making -> make).
fn repair_strip(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 3 && b[n - 1] == b[n - 2] && is_consonant(b[n - 1]) && !matches!(b[n - 1], b'l' | b's' | b'f' | b'z') {
        return stem[..n - 1].to_string();
    }
    if n >= 3
        && is_consonant(b[n - 1])
        && !matches!(b[n - 1], b'w' | b'x' | b'y')
        && is_vowel(b[n - 2])
        && is_consonant(b[n - 3])
    {
        return format!("{stem}e");
    }
    stem.to_string()
}

/// Lemmatize one lowercase token. Falls back to the identity when no
/// irregular entry or suffix rule applies; the result is always a fixed
/// point of the function itself.
pub fn lemmatize(word: &str, pos: Pos) -> String {
    let table = match pos {
        Pos::Verb => IRREGULAR_VERBS,
        Pos::Noun => IRREGULAR_NOUNS,
    };
    if let Some((_, lemma)) = table.iter().find(|(form, _)| *form == word) {
        return (*lemma).to_string();
    }

    let n = word.len();
    if let Some(stem) = word.strip_suffix("ies") {
        if n >= 5 {
            return format!("{stem}y");
        }
    }
    if pos == Pos::Noun {
        if let Some(stem) = word.strip_suffix("ves") {
            if n >= 5 {
                return format!("{stem}f");
            }
        }
    }
    if let Some(stem) = word.strip_suffix("es") {
        if n >= 4 && strips_whole_es(stem) {
            return stem.to_string();
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if n >= 3 && !stem.ends_with('s') {
            return stem.to_string();
        }
    }
    if pos == Pos::Verb {
        if let Some(stem) = word.strip_suffix("ing") {
            if n >= 5 {
                return repair_strip(stem);
            }
        }
        if let Some(stem) = word.strip_suffix("ed") {
            if n >= 4 {
                return repair_strip(stem);
            }
        }
    }
    word.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_rules() {
        assert_eq!(lemmatize("playing", Pos::Verb), "play");
        assert_eq!(lemmatize("running", Pos::Verb), "run");
        assert_eq!(lemmatize("making", Pos::Verb), "make");
        assert_eq!(lemmatize("cooks", Pos::Verb), "cook");
        assert_eq!(lemmatize("sings", Pos::Verb), "sing");
        assert_eq!(lemmatize("fixes", Pos::Verb), "fix");
        assert_eq!(lemmatize("goes", Pos::Verb), "go");
        assert_eq!(lemmatize("carries", Pos::Verb), "carry");
        assert_eq!(lemmatize("stopped", Pos::Verb), "stop");
        assert_eq!(lemmatize("played", Pos::Verb), "play");
    }

    #[test]
    fn noun_rules() {
        assert_eq!(lemmatize("puppies", Pos::Noun), "puppy");
        assert_eq!(lemmatize("wolves", Pos::Noun), "wolf");
        assert_eq!(lemmatize("boxes", Pos::Noun), "box");
        assert_eq!(lemmatize("dishes", Pos::Noun), "dish");
        assert_eq!(lemmatize("horses", Pos::Noun), "horse");
        assert_eq!(lemmatize("cats", Pos::Noun), "cat");
        assert_eq!(lemmatize("glasses", Pos::Noun), "glass");
    }

    #[test]
    fn irregular_table_wins() {
        assert_eq!(lemmatize("children", Pos::Noun), "child");
        assert_eq!(lemmatize("was", Pos::Verb), "be");
        assert_eq!(lemmatize("bringing", Pos::Verb), "bring");
        assert_eq!(lemmatize("bring", Pos::Verb), "bring");
    }

    #[test]
    fn identity_fallback() {
        assert_eq!(lemmatize("desert", Pos::Noun), "desert");
        assert_eq!(lemmatize("sing", Pos::Verb), "sing");
        assert_eq!(lemmatize("man", Pos::Noun), "man");
    }
}
