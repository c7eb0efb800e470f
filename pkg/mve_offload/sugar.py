"""
Sugar.

This module contains utility decorators shared by the blocking components.
"""

import asyncio

from collections.abc import Coroutine
from concurrent.futures import ThreadPoolExecutor
from functools import partial, wraps
from typing import Any, Callable, Union


def dual(sync_method: Callable) -> Callable:
    """Make a blocking method work both synchronously and asynchronously.

    If an event loop is already running, the method will execute in a thread pool,
    returning an awaitable object. Otherwise, the synchronous function is called directly.

    The owner must define ``_alock``, ``_aexecutor`` and ``_loop`` (all ``None``
    initially); they are created on the first asynchronous call.

    class A:

        @dual
        def method():
            ...

    a = A()
    a.method()
    await a.method()

    :param sync_method: synchronous method
    """

    @wraps(sync_method)
    def wrapper(self: Any, *args: Any, **kwargs: Any) -> Union[Coroutine[Any, Any, Any], Any]:
        try:
            loop = asyncio.get_running_loop()
        except RuntimeError:
            loop = None

        async def async_inner(self: Any, *args: Any, **kwargs: Any) -> Any:
            if self._alock is None:
                self._alock = asyncio.Lock()
            if self._aexecutor is None:
                self._aexecutor = ThreadPoolExecutor(
                    max_workers=1, thread_name_prefix=f"{self.__class__.__name__}Async"
                )
            if self._loop is None:
                self._loop = asyncio.get_running_loop()
            async with self._alock:
                call = partial(sync_method, self, *args, **kwargs)
                return await self._loop.run_in_executor(self._aexecutor, call)

        if loop and loop.is_running():
            return async_inner(self, *args, **kwargs)
        return sync_method(self, *args, **kwargs)

    return wrapper
