# Worker map untuk pekerjaan berat (sintesis sampel, inferensi pseudo-label).
# Sama seperti controller Johnson: hitungan berat dipindah ke thread pool
# via eventlet.tpool supaya loop utama tidak macet. Urutan hasil = urutan input.

import logging

import eventlet
from eventlet import tpool

LOG = logging.getLogger(__name__)


def ordered_map(fn, items, workers=1):
    """Apply fn to every item; results come back in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    pool = eventlet.GreenPool(size=workers)
    LOG.debug(">>> [POOL] %d jobs on %d workers", len(items), workers)
    return list(pool.imap(lambda item: tpool.execute(fn, item), items))
