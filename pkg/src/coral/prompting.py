"""Collaborative prompt construction.

A :class:`PromptContext` carries the evidence visible to the oracle: the target user's
own supporting ratings and the ratings linking retrieved users to retrieved items.
Rendering partitions that evidence into liked/disliked lists at a rating threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

Y_THRESH = 4
M_MAX = 20

ROLE_PLAY = "As a recommender system please solve the following problem."
SUMMARIZE = (
    "Try to understand the pattern that the item {item} is typically liked by what kinds "
    "of users based on the above information."
)
LIKED = "The item {item} is liked by the users [{users}]."
DISLIKED = "The item {item} is disliked by the users [{users}]."
USER_POS = "Items the user {user} likes are as follows: [{items}]."
USER_NEG = "Items the user {user} does not likes are as follows: [{items}]."
QUERY = "For the item described as {item}, would you recommend it to the user {user}?"
ANSWER = 'Answer either "Yes" or "No" without additional text.'


class PromptError(ValueError):
    pass


class TargetPair(NamedTuple):
    user: int
    item: int


@dataclass(frozen=True)
class PromptContext:
    """Evidence bundle for one target pair.

    ``supp_items`` is an ordered tuple of (item_idx, rating) for the target user;
    ``evidence`` maps (coll_user, coll_item) to rating for every retrieved pair of
    entities that has a training rating.
    """

    target: TargetPair
    supp_items: tuple
    coll_users: tuple = ()
    coll_items: tuple = ()
    evidence: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.supp_items:
            raise PromptError("a prompt needs at least one supporting item")
        if len(self.coll_users) != len(self.coll_items):
            raise PromptError("coll_users and coll_items must have equal length")
        if len(set(self.coll_users)) != len(self.coll_users):
            raise PromptError("duplicate retrieved user")
        if len(set(self.coll_items)) != len(self.coll_items):
            raise PromptError("duplicate retrieved item")

    @property
    def supp_item_ids(self):
        return tuple(i for i, _ in self.supp_items)

    def rating(self, user_idx, item_idx):
        """Rating visible in this context, or None."""
        if user_idx == self.target.user:
            for i, r in self.supp_items:
                if i == item_idx:
                    return r
            return None
        return self.evidence.get((user_idx, item_idx))

    def with_retrieved(self, user_idx, item_idx, matrix):
        """New context with one more retrieved (user, item) pair."""
        users = self.coll_users + (int(user_idx),)
        items = self.coll_items + (int(item_idx),)
        evidence = dict(self.evidence)
        for v in users:
            r = matrix.rating(v, item_idx)
            if r is not None:
                evidence[v, int(item_idx)] = r
        for j in items:
            r = matrix.rating(user_idx, j)
            if r is not None:
                evidence[int(user_idx), j] = r
        return PromptContext(self.target, self.supp_items, users, items, evidence)


def select_supp_items(user_idx, matrix, m_max=M_MAX, exclude=()):
    """The user's ``m_max`` most recent training ratings as (item_idx, rating), newest first."""
    rated = matrix.by_user.get(user_idx, {})
    items = [i for i in rated if i not in exclude]
    if not items:
        raise PromptError(f"user {user_idx} has no training interactions")
    items.sort(key=lambda i: (-matrix.timestamps[user_idx, i], i))
    return tuple((i, rated[i]) for i in items[:m_max])


def build_context(target, matrix, m_max=M_MAX):
    """Initial context: supporting items only. The target item itself is never a support."""
    target = TargetPair(int(target[0]), int(target[1]))
    supp = select_supp_items(target.user, matrix, m_max, exclude={target.item})
    return PromptContext(target, supp)


def pos_neg_users(item_idx, coll_users, ratings, y_thresh=Y_THRESH):
    """Split the retrieved users who rated ``item_idx`` into likers and dislikers.

    ``ratings`` is anything with ``rating(user, item)`` (a RatingMatrix or a context).
    """
    if not 1 <= y_thresh <= 5:
        raise PromptError(f"y_thresh out of range: {y_thresh}")
    pos, neg = [], []
    for v in sorted(set(coll_users)):
        r = ratings.rating(v, item_idx)
        if r is None:
            continue
        (pos if r >= y_thresh else neg).append(v)
    return pos, neg


def pos_neg_items(user_idx, supp_items, ratings, y_thresh=Y_THRESH):
    if not supp_items:
        raise PromptError("supporting item set is empty")
    pos, neg = [], []
    for i in supp_items:
        r = ratings.rating(user_idx, i)
        if r is None:
            raise PromptError(f"supporting item {i} is not rated by user {user_idx}")
        (pos if r >= y_thresh else neg).append(i)
    return pos, neg


def user_token(idx):
    return f"User_{idx}"


def item_token(idx, descriptions):
    try:
        desc = descriptions[idx]
    except KeyError:
        raise PromptError(f"no description for item {idx}") from None
    if not desc:
        raise PromptError(f"empty description for item {idx}")
    return f'"{desc} (Item_{idx})"'


def render_prompt(ctx, descriptions, y_thresh=Y_THRESH):
    """Deterministic prompt text for ``ctx``; ``descriptions`` maps item_idx to text."""
    lines = [ROLE_PLAY]

    collab, summaries = [], []
    for j in ctx.coll_items:
        pos, neg = pos_neg_users(j, ctx.coll_users, ctx, y_thresh)
        if not pos and not neg:
            continue
        tok = item_token(j, descriptions)
        if pos:
            collab.append(LIKED.format(item=tok, users=", ".join(map(user_token, pos))))
        if neg:
            collab.append(DISLIKED.format(item=tok, users=", ".join(map(user_token, neg))))
        summaries.append(SUMMARIZE.format(item=tok))
    lines += collab + summaries

    user = user_token(ctx.target.user)
    pos, neg = pos_neg_items(ctx.target.user, ctx.supp_item_ids, ctx, y_thresh)
    lines.append(USER_POS.format(user=user, items=", ".join(item_token(i, descriptions) for i in pos)))
    lines.append(USER_NEG.format(user=user, items=", ".join(item_token(i, descriptions) for i in neg)))
    lines.append(QUERY.format(item=item_token(ctx.target.item, descriptions), user=user))
    lines.append(ANSWER)
    return "\n".join(lines) + "\n"
