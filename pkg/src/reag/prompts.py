"""Canonical prompt templates for the critic and the generator.

The strings below are the wire contract: golden-file tests pin them byte for
byte, so any edit here must update the goldens deliberately. Placeholders use
``{Question}`` / ``{Passage}`` markers and are substituted by plain string
replacement (never ``str.format``, which would choke on braces in user text).
"""

from __future__ import annotations

CRITIC_SYSTEM_PROMPT = """\
You are a multimodal reasoning assistant specialized in Knowledge-Based Visual Question Answering (KB-VQA).

Your task is to evaluate whether a given text passage provides useful and relevant information for answering a question about an image.

You will be given:

- Image: a visual scene containing entities, actions, and context.

- Question: a natural-language question that refers to the image.

- Text Passage: an external knowledge snippet retrieved from a database.

You must analyze the semantic alignment between the text, the image, and the question. Follow these steps carefully before giving your final decision:

1. Understand the visual scene: Identify the key objects, people, actions, and context visible in the image.

2. Interpret the question: Determine what information the question seeks (e.g., factual, reasoning, counting, attribute-based).

3. Analyze the text passage: Extract the main claims, facts, and entities mentioned in the text.

Compare for relevance: Assess whether the information in the text:

- Contains at least one sentence that supports answering the question about the image, OR

- Provides background knowledge needed to interpret or reason about the image-question pair.

Important:

- If even a single sentence in the passage is relevant or useful, consider the entire passage as relevant and answer "Yes".

- If no part of the passage contributes meaningfully to answering the question, answer "No".

Output only one word:

"Yes" -> if the text provides relevant or useful information for answering the question.

"No" -> if the text is irrelevant or unhelpful."""

CRITIC_USER_TEMPLATE = """\
Here is the question on the image above:

{Question}

Here is the text passage to analyze: {Passage}

Does the text passage contain at least one sentence that may have some information useful to answer the user question? "Yes"/"No" answer:"""

GENERATOR_SYSTEM_PROMPT = (
    "A conversation between User and Assistant. The user asks a question, and the "
    "Assistant solves it. The assistant first thinks about the reasoning process and "
    "then provides the user with the answer. The reasoning process and answer are "
    "enclosed within <think> </think> and <answer> </answer> tags, respectively, "
    "i.e., <think>reasoning process here</think><answer>short answer here</answer>."
)

GENERATOR_USER_HEADER = """\
{Question}

The following paragraphs may contain useful information to help answer the question correctly:"""

GENERATOR_USER_NO_PASSAGES_TEMPLATE = "{Question}"

PARAGRAPH_OPEN = "<paragraph>"
PARAGRAPH_CLOSE = "</paragraph>"


def render_critic_user(question: str, passage: str) -> str:
    return CRITIC_USER_TEMPLATE.replace("{Question}", question).replace("{Passage}", passage)


def render_generator_user(question: str, passages: list[str] | tuple[str, ...]) -> str:
    """Build the generator user prompt; with zero passages the bare-question
    variant is used instead of an empty paragraph list."""
    if not passages:
        return GENERATOR_USER_NO_PASSAGES_TEMPLATE.replace("{Question}", question)
    header = GENERATOR_USER_HEADER.replace("{Question}", question)
    blocks = [f"{PARAGRAPH_OPEN}{p}{PARAGRAPH_CLOSE}" for p in passages]
    return "\n\n".join([header, *blocks])


TEMPLATE_NAMES = (
    "critic-system",
    "critic-user",
    "generator-system",
    "generator-user",
    "generator-user-no-passages",
)


def render_template(name: str, question: str = "{Question}", passage: str = "{Passage}") -> str:
    """Render one named template; defaults leave the placeholders visible."""
    if name == "critic-system":
        return CRITIC_SYSTEM_PROMPT
    if name == "critic-user":
        return render_critic_user(question, passage)
    if name == "generator-system":
        return GENERATOR_SYSTEM_PROMPT
    if name == "generator-user":
        passages = [passage] if passage != "{Passage}" else ["{Passage_1}", "{Passage_j}"]
        return render_generator_user(question, passages)
    if name == "generator-user-no-passages":
        return GENERATOR_USER_NO_PASSAGES_TEMPLATE.replace("{Question}", question)
    raise KeyError(f"unknown template {name!r}; expected one of {TEMPLATE_NAMES}")
