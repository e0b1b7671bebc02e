use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::emoji::{in_emoji_range, EmojiTable};
use super::{CleanTweet, RawTweet, MAX_RAW_CHARS};
use crate::{URL_TOKEN, USER_TOKEN};

static RETWEET_PREFIX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^rt\s+@\w+\s*:?\s*").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)https?://\S*").unwrap());
static USER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@\w+").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CleanError {
    #[error("empty tweet id")]
    EmptyId,
    #[error("text has {0} characters, above the {MAX_RAW_CHARS} limit")]
    TooLong(usize),
}

impl CleanError {
    /// Short machine-readable reason for the reject log.
    pub fn reason(&self) -> &'static str {
        match self {
            CleanError::EmptyId => "empty_id",
            CleanError::TooLong(_) => "text_too_long",
        }
    }
}

/// Normalizes one tweet.
///
/// Order matters for idempotence: characters are lowercased and filtered
/// before the URL and username passes, so deleting a character can never
/// splice together a new `http://` or `@name`.
pub fn clean_tweet(raw: &RawTweet, emoji: &EmojiTable) -> Result<CleanTweet, CleanError> {
    if raw.id.is_empty() {
        return Err(CleanError::EmptyId);
    }
    let n = raw.text.chars().count();
    if n > MAX_RAW_CHARS {
        return Err(CleanError::TooLong(n));
    }

    let mut text = raw.text.trim();
    let was_retweet = is_retweet(text);
    if was_retweet {
        while let Some(m) = RETWEET_PREFIX.find(text) {
            text = &text[m.end()..];
        }
    }

    let lowered = text.to_lowercase();
    let mut mapped = String::with_capacity(lowered.len() + 16);
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            mapped.push(' ');
        } else if let Some(code) = emoji.get(ch) {
            mapped.push_str(" :");
            mapped.push_str(code);
            mapped.push_str(": ");
        } else if in_emoji_range(ch) || ch.is_control() || is_invisible_format(ch) {
            continue;
        } else {
            mapped.push(ch);
        }
    }

    let replaced = replace_spaced(&mapped, &URL, URL_TOKEN);
    let replaced = replace_spaced(&replaced, &USER, USER_TOKEN);
    let text = replaced.split_whitespace().collect::<Vec<_>>().join(" ");

    Ok(CleanTweet {
        id: raw.id.clone(),
        text,
        was_retweet,
    })
}

/// Replaces every match with `token`, adding a space on either side only
/// where the neighbour is alphanumeric, so the placeholder stays a separate
/// word without detaching trailing punctuation.
fn replace_spaced(text: &str, re: &Regex, token: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in re.find_iter(text) {
        out.push_str(&text[last..m.start()]);
        if text[..m.start()]
            .chars()
            .next_back()
            .is_some_and(char::is_alphanumeric)
        {
            out.push(' ');
        }
        out.push_str(token);
        if text[m.end()..]
            .chars()
            .next()
            .is_some_and(char::is_alphanumeric)
        {
            out.push(' ');
        }
        last = m.end();
    }
    out.push_str(&text[last..]);
    out
}

fn is_retweet(trimmed: &str) -> bool {
    trimmed
        .get(..4)
        .is_some_and(|p| p.eq_ignore_ascii_case("rt @"))
}

fn is_invisible_format(ch: char) -> bool {
    matches!(
        u32::from(ch),
        0x00AD | 0x200B..=0x200F | 0x202A..=0x202E | 0x2060..=0x2064 | 0xFEFF
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(text: &str) -> CleanTweet {
        clean_tweet(&RawTweet::new("1", text), &EmojiTable::builtin()).unwrap()
    }

    #[test]
    fn retweet_with_url_and_emoji() {
        let c = clean("RT @alice: Check https://ex.co 😄");
        assert_eq!(c.text, "check twitterurl :smile:");
        assert!(c.was_retweet);
    }

    #[test]
    fn plain_text_is_fixed_point() {
        let c = clean("hello world");
        assert_eq!(c.text, "hello world");
        assert!(!c.was_retweet);
    }

    #[test]
    fn mentions_and_urls_inside_text() {
        let c = clean("Thanks @Bob_99 and @carol! see HTTP://X.org/a?b=1 now");
        assert_eq!(
            c.text,
            "thanks twitteruser and twitteruser! see twitterurl now"
        );
    }

    #[test]
    fn placeholders_stay_separate_words() {
        assert_eq!(clean("x@bob hi").text, "x twitteruser hi");
        assert_eq!(
            clean("(@bob) see:https://a.b").text,
            "(twitteruser) see:twitterurl"
        );
    }

    #[test]
    fn retweet_detection_is_prefix_only() {
        assert!(clean("  rt @x hi").was_retweet);
        assert!(!clean("not RT @x hi").was_retweet);
        assert!(!clean("RT: hi").was_retweet);
        assert_eq!(clean("RT @a: RT @b: hi").text, "hi");
    }

    #[test]
    fn unknown_emoji_and_controls_deleted() {
        // U+1FAFF is in the emoji block but not in the table.
        let c = clean("a\u{1FAFF}b\u{0007}c\u{200B}d\te");
        assert_eq!(c.text, "abcd e");
    }

    #[test]
    fn deletion_cannot_splice_mentions() {
        let c = clean("@\u{200B}abc htt\u{1FAFF}p://x");
        assert_eq!(c.text, "twitteruser twitterurl");
    }

    #[test]
    fn zwj_sequences_become_separate_codes() {
        let c = clean("family 👨\u{200D}👩");
        assert_eq!(c.text, "family :man: :woman:");
    }

    #[test]
    fn validation_errors() {
        let t = EmojiTable::builtin();
        assert_eq!(
            clean_tweet(&RawTweet::new("", "x"), &t).unwrap_err(),
            CleanError::EmptyId
        );
        let long = "a".repeat(MAX_RAW_CHARS + 1);
        assert!(matches!(
            clean_tweet(&RawTweet::new("1", long), &t),
            Err(CleanError::TooLong(_))
        ));
    }
}
