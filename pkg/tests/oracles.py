"""Brute-force reference implementations shared by the unit and acceptance tests."""
import itertools
from collections import Counter


def brute_force_core(ints, min_user, min_item):
    """Largest sub-multiset satisfying both degree bounds, by exhaustive search over user subsets."""
    users = sorted({it.user for it in ints})
    best = []
    for r in range(len(users), 0, -1):
        for keep in itertools.combinations(users, r):
            sub = [it for it in ints if it.user in keep]
            # items can only be removed; iterate the item side alone to its fixpoint
            while True:
                ic = Counter(it.item for it in sub)
                nxt = [it for it in sub if ic[it.item] >= min_item]
                if len(nxt) == len(sub):
                    break
                sub = nxt
            uc = Counter(it.user for it in sub)
            if sub and all(uc[u] >= min_user for u in keep) and set(uc) == set(keep):
                if len(sub) > len(best):
                    best = sub
        if best:
            break
    return sorted(best)


def brute_rank(scores, test):
    # ties are resolved against the test item: it sorts after equal scores
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i == test))
    return order.index(test) + 1
