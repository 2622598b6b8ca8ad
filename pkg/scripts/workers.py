"""
Bounded thread fan-out used by clustering seed trials and batch classification.
"""

import asyncio


async def _gather_bounded(fn, items, threads):
    semaphore = asyncio.Semaphore(threads)

    async def _one(item):
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    return await asyncio.gather(*[_one(item) for item in items])


def run_parallel(fn, items, threads=1):
    """Apply fn to every item, at most `threads` at a time. Results keep input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return list(asyncio.run(_gather_bounded(fn, items, threads)))
