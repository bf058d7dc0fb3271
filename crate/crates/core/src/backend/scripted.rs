//! Deterministic in-process backends: a response queue for unit tests, a
//! rule-based solver simulation for end-to-end runs, and a capturing wrapper
//! for request audits.

use std::collections::{BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::backend::{
    word_count, Backend, BackendError, BackendKind, ChatRequest, ChatResponse,
};
use crate::rng::{fnv1a64_fields, SplitMix64};

fn scripted_response(request: &ChatRequest, text: String) -> ChatResponse {
    ChatResponse {
        input_tokens: word_count(&request.system_prompt) + word_count(&request.user_message),
        output_tokens: word_count(&text),
        text,
        backend_kind: BackendKind::Scripted,
    }
}

/// Pops canned responses off a queue, in order, regardless of the request.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<String>>,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let next = self.queue.lock().unwrap().pop_front();
        match next {
            Some(text) => Ok(scripted_response(request, text)),
            None => Err(BackendError::ScriptExhausted),
        }
    }
}

/// A pure-function model simulation for desk-scale experiments.
///
/// Responses are a deterministic function of (salt, request content), so a
/// run is reproducible, records cleanly, and replays bit-identically, while
/// different salts give the trial-to-trial variance a sampled model would.
///
/// Behavior:
/// - task answers are read from `[[answer:...]]` / `[[wrong:...]]` markers in
///   the question (the synthetic datasets embed them); the chance of picking
///   the right one grows with the number of distinct `insight-` tokens the
///   system prompt carries;
/// - prompt updates emit bodies with a salted set of `insight-` tokens, so
///   prompt quality drifts across iterations and selection has something to
///   select on;
/// - critic calls compare the answer in the generator output against the
///   question marker, with a reliability that grows with critic prompt
///   quality, and phrase their verdict per the tags the critic suffix asks
///   for.
pub struct MockSolverBackend {
    salt: u64,
}

const INSIGHT_PREFIX: &str = "insight-";

fn find_marker(text: &str, open: &str) -> Option<String> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find("]]")? + start;
    Some(text[start..end].trim().to_string())
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
}

/// Count distinct insight tokens, capped at 6.
fn prompt_quality(system_prompt: &str) -> u64 {
    let mut tokens = BTreeSet::new();
    let mut from = 0;
    while let Some(pos) = system_prompt[from..].find(INSIGHT_PREFIX) {
        let start = from + pos + INSIGHT_PREFIX.len();
        let token: String = system_prompt[start..]
            .chars()
            .take_while(|c| c.is_ascii_hexdigit())
            .collect();
        if token.len() == 8 {
            tokens.insert(token);
        }
        from = start;
    }
    (tokens.len() as u64).min(6)
}

impl MockSolverBackend {
    pub fn new(salt: u64) -> Self {
        Self { salt }
    }

    fn rng_for(&self, request: &ChatRequest) -> SplitMix64 {
        let seed = fnv1a64_fields(&[
            &self.salt.to_le_bytes(),
            request.system_prompt.as_bytes(),
            request.user_message.as_bytes(),
        ]);
        SplitMix64::new(seed)
    }

    fn answer_text(&self, request: &ChatRequest, rng: &mut SplitMix64) -> String {
        let quality = prompt_quality(&request.system_prompt);
        let success_pct = 25 + 12 * quality;
        let correct = rng.next_below(100) < success_pct;
        let marker = if correct {
            find_marker(&request.user_message, "[[answer:")
        } else {
            find_marker(&request.user_message, "[[wrong:")
        };
        match marker {
            Some(payload) => format!(
                "Working through the task step by step before committing.\n<answer>{payload}</answer>"
            ),
            None => "The task gives no usable signal; declining to answer.".to_string(),
        }
    }

    fn new_prompt_body(&self, preamble: &str, rng: &mut SplitMix64) -> String {
        let count = 1 + rng.next_below(5);
        let tokens: Vec<String> = (0..count)
            .map(|_| format!("{INSIGHT_PREFIX}{:08x}", rng.next_u64() as u32))
            .collect();
        format!("{preamble} Keep in mind: {}.", tokens.join(" "))
    }

    fn critic_text(&self, request: &ChatRequest, rng: &mut SplitMix64) -> String {
        let marker = find_marker(&request.user_message, "[[answer:");
        let provided = crate::task::ANSWER_OPEN;
        let answered = request
            .user_message
            .rfind(provided)
            .and_then(|open| {
                let start = open + provided.len();
                request.user_message[start..]
                    .find(crate::task::ANSWER_CLOSE)
                    .map(|close| request.user_message[start..start + close].to_string())
            });
        let matches = match (&marker, &answered) {
            (Some(m), Some(a)) => normalize(m) == normalize(a),
            _ => false,
        };
        let quality = prompt_quality(&request.system_prompt);
        let reliable = rng.next_below(100) < 55 + 7 * quality;
        let judged_correct = if reliable { matches } else { !matches };

        let smooth = request.system_prompt.contains("<score>");
        if smooth {
            let score = if judged_correct {
                60 + rng.next_below(41)
            } else {
                rng.next_below(41)
            };
            format!(
                "The final answer was checked against the question's structure.\n<score>{score}</score>"
            )
        } else {
            let verdict = if judged_correct { "correct" } else { "incorrect" };
            format!(
                "The final answer was checked against the question's structure.\n<verdict>{verdict}</verdict>"
            )
        }
    }
}

impl Backend for MockSolverBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        use crate::backend::RequestTag::*;
        let mut rng = self.rng_for(request);
        let text = match request.tag {
            Generation => self.answer_text(request, &mut rng),
            FeedbackOutput => format!(
                "The answers commit too early (pattern {:08x}); each step needs an explicit check before the final tags.",
                rng.next_u64() as u32
            ),
            FeedbackPrompt => format!(
                "The system prompt should demand a systematic walkthrough (pattern {:08x}) and verification of every step.",
                rng.next_u64() as u32
            ),
            Update => self.new_prompt_body(
                "Answer the task systematically, verifying each step before the final tags.",
                &mut rng,
            ),
            Critic => self.critic_text(request, &mut rng),
            Meta => self.new_prompt_body(
                "Judge the provided answers rigorously, citing the decisive step.",
                &mut rng,
            ),
        };
        Ok(scripted_response(request, text))
    }
}

/// Wraps a backend, recording every request and tracking call concurrency.
pub struct CapturingBackend {
    inner: Arc<dyn Backend>,
    requests: Mutex<Vec<ChatRequest>>,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl CapturingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
            calls: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::Relaxed)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Backend for CapturingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        self.requests.lock().unwrap().push(request.clone());
        let result = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RequestTag;

    fn request(tag: RequestTag, system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            system_prompt: system.into(),
            user_message: user.into(),
            temperature: 0.5,
            top_p: 0.95,
            max_tokens: 100,
            tag,
        }
    }

    #[test]
    fn queue_passes_responses_through() {
        let backend = ScriptedBackend::new(["A"]);
        let resp = backend
            .complete(&request(RequestTag::Generation, "sys", "user words here"))
            .unwrap();
        assert_eq!(resp.text, "A");
        assert_eq!(resp.input_tokens, 4); // "sys" + 3 user words
        assert_eq!(resp.output_tokens, 1);
        assert_eq!(resp.backend_kind, BackendKind::Scripted);
    }

    #[test]
    fn exhausted_queue_is_an_error() {
        let backend = ScriptedBackend::new(Vec::<String>::new());
        let err = backend
            .complete(&request(RequestTag::Generation, "s", "u"))
            .unwrap_err();
        assert!(matches!(err, BackendError::ScriptExhausted));
    }

    #[test]
    fn solver_is_a_pure_function_of_salt_and_request() {
        let req = request(
            RequestTag::Generation,
            "Answer carefully.",
            "Q1 [[answer:B]] [[wrong:C]]",
        );
        let a = MockSolverBackend::new(7).complete(&req).unwrap();
        let b = MockSolverBackend::new(7).complete(&req).unwrap();
        assert_eq!(a, b);
        let c = MockSolverBackend::new(8).complete(&req).unwrap();
        // different salt may or may not flip this request; the streams differ
        let req2 = request(RequestTag::Update, "Answer carefully.", "improve it");
        assert_ne!(
            MockSolverBackend::new(7).complete(&req2).unwrap().text,
            MockSolverBackend::new(8).complete(&req2).unwrap().text,
        );
        let _ = c;
    }

    #[test]
    fn solver_answers_come_from_markers() {
        let req = request(
            RequestTag::Generation,
            "Answer.",
            "Q [[answer:yes, no, unknown]] [[wrong:no, no, no]]",
        );
        let resp = MockSolverBackend::new(1).complete(&req).unwrap();
        assert!(
            resp.text.contains("<answer>yes, no, unknown</answer>")
                || resp.text.contains("<answer>no, no, no</answer>"),
            "unexpected mock answer: {}",
            resp.text
        );
    }

    #[test]
    fn better_prompts_answer_better() {
        // empirical success rate over many synthetic questions must rise
        // with the number of insight tokens in the system prompt
        let weak = "Answer.";
        let strong = "Answer. insight-00000001 insight-00000002 insight-00000003 \
                      insight-00000004 insight-00000005 insight-00000006";
        let backend = MockSolverBackend::new(3);
        let mut hits = [0u32; 2];
        for (slot, sys) in [weak, strong].iter().enumerate() {
            for i in 0..400 {
                let req = request(
                    RequestTag::Generation,
                    sys,
                    &format!("Q{i} [[answer:B]] [[wrong:C]]"),
                );
                let resp = backend.complete(&req).unwrap();
                if resp.text.contains("<answer>B</answer>") {
                    hits[slot] += 1;
                }
            }
        }
        assert!(
            hits[1] > hits[0] + 100,
            "quality did not move accuracy: weak={} strong={}",
            hits[0],
            hits[1]
        );
    }

    #[test]
    fn critic_uses_verdict_or_score_tags() {
        let user = "Question: Q [[answer:B]]\n\nProposed answer: <answer>B</answer>";
        let binary = request(
            RequestTag::Critic,
            "Judge answers. State your verdict inside <verdict></verdict> tags.",
            user,
        );
        let resp = MockSolverBackend::new(5).complete(&binary).unwrap();
        assert!(resp.text.contains("<verdict>"), "{}", resp.text);

        let smooth = request(
            RequestTag::Critic,
            "Judge answers. State a score from 0 to 100 inside <score></score> tags.",
            user,
        );
        let resp = MockSolverBackend::new(5).complete(&smooth).unwrap();
        assert!(resp.text.contains("<score>"), "{}", resp.text);
    }

    #[test]
    fn capturing_wrapper_counts_calls() {
        let inner = Arc::new(ScriptedBackend::new(["x", "y"]));
        let cap = CapturingBackend::new(inner);
        cap.complete(&request(RequestTag::Generation, "s", "u")).unwrap();
        cap.complete(&request(RequestTag::Update, "s", "u2")).unwrap();
        assert_eq!(cap.calls(), 2);
        let reqs = cap.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].tag, RequestTag::Update);
    }
}
