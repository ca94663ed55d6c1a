//! Pinned English stopword list used by the semantic gate and by query
//! formulation.
//!
//! The list is embedded in the binary and versioned so that trigger scores
//! stay reproducible across builds.

use std::collections::HashSet;
use std::sync::OnceLock;

/// Version tag of the embedded list. Bump on any edit to [`ENGLISH_STOPWORDS`].
pub const ENGLISH_STOPWORDS_VERSION: &str = "en-pinned-1";

pub const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "above", "across", "after", "afterwards", "again", "against", "all", "almost",
    "alone", "along", "already", "also", "although", "always", "am", "among", "amongst", "amount",
    "an", "and", "another", "any", "anyhow", "anyone", "anything", "anyway", "anywhere", "are",
    "around", "as", "at", "back", "be", "became", "because", "become", "becomes", "becoming",
    "been", "before", "beforehand", "behind", "being", "below", "beside", "besides", "between",
    "beyond", "both", "bottom", "but", "by", "ca", "call", "can", "cannot", "could", "did", "do",
    "does", "doing", "done", "down", "due", "during", "each", "either", "else", "elsewhere",
    "empty", "enough", "even", "ever", "every", "everyone", "everything", "everywhere", "except",
    "few", "for", "former", "formerly", "from", "front", "full", "further", "get", "give", "go",
    "had", "has", "have", "he", "hence", "her", "here", "hereafter", "hereby", "herein",
    "hereupon", "hers", "herself", "him", "himself", "his", "how", "however", "i", "if", "in",
    "indeed", "into", "is", "it", "it's", "its", "itself", "just", "keep", "last", "latter",
    "latterly", "least", "less", "made", "make", "many", "may", "me", "meanwhile", "might",
    "mine", "more", "moreover", "most", "mostly", "move", "much", "must", "my", "myself", "n't",
    "name", "namely", "neither", "never", "nevertheless", "next", "no", "nobody", "none",
    "noone", "nor", "not", "nothing", "now", "nowhere", "of", "off", "often", "on", "once",
    "only", "onto", "or", "other", "others", "otherwise", "our", "ours", "ourselves", "out",
    "over", "own", "part", "per", "perhaps", "please", "put", "quite", "rather", "re", "really",
    "regarding", "same", "say", "see", "seem", "seemed", "seeming", "seems", "serious",
    "several", "she", "should", "show", "side", "since", "so", "some", "somehow", "someone",
    "something", "sometime", "sometimes", "somewhere", "still", "such", "take", "than", "that",
    "the", "their", "them", "themselves", "then", "thence", "there", "thereafter", "thereby",
    "therefore", "therein", "thereupon", "these", "they", "this", "those", "though", "through",
    "throughout", "thru", "thus", "to", "together", "too", "top", "toward", "towards", "under",
    "unless", "until", "up", "upon", "us", "used", "using", "various", "very", "via", "was",
    "we", "well", "were", "what", "whatever", "when", "whence", "whenever", "where",
    "whereafter", "whereas", "whereby", "wherein", "whereupon", "wherever", "whether", "which",
    "while", "whither", "who", "whoever", "whole", "whom", "whose", "why", "will", "with",
    "within", "without", "would", "yet", "you", "your", "yours", "yourself", "yourselves",
];

/// Case-folded, immutable set of stopwords.
#[derive(Debug, Clone)]
pub struct StopwordSet {
    version: String,
    words: HashSet<String>,
}

impl StopwordSet {
    pub fn new<I, S>(version: impl Into<String>, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            version: version.into(),
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    /// The embedded English list, built once per process.
    pub fn english() -> &'static StopwordSet {
        static SET: OnceLock<StopwordSet> = OnceLock::new();
        SET.get_or_init(|| StopwordSet::new(ENGLISH_STOPWORDS_VERSION, ENGLISH_STOPWORDS))
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Case-insensitive membership of an already bare word.
    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    /// True when `word`, after stripping surrounding punctuation, is a
    /// stopword or has no content left at all.
    pub fn is_stop_word(&self, word: &str) -> bool {
        let bare = bare_word(word);
        bare.is_empty() || self.words.contains(&bare)
    }
}

/// Case-folds `word` and strips leading/trailing non-alphanumeric characters.
pub fn bare_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn membership_is_case_insensitive() {
        let set = StopwordSet::english();
        assert!(set.contains("the"));
        assert!(set.contains("The"));
        assert!(set.contains("THE"));
        assert!(!set.contains("Genghis"));
    }

    #[test]
    fn punctuation_is_stripped_before_lookup() {
        let set = StopwordSet::english();
        assert!(set.is_stop_word("The,"));
        assert!(set.is_stop_word("(of)"));
        assert!(!set.is_stop_word("2013."));
        assert!(set.is_stop_word("..."));
    }

    #[test]
    fn embedded_list_has_no_duplicates() {
        let set = StopwordSet::english();
        assert_eq!(set.len(), ENGLISH_STOPWORDS.len());
    }
}
